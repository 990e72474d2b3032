"""pillarfuse: cooperative multi-LiDAR 3D object detection on a shared pillar grid.

The pipeline: point clouds from several sensors are aligned into one global
frame, cropped to a common window, encoded into per-pillar features, scattered
onto a birds-eye-view grid, fused cell-wise across sensors by elementwise max,
and decoded into oriented 3D boxes by a convolutional detection head.
"""

__version__ = "0.1.0"
