"""Birds-eye-view rendering of frames to portable pixmaps.

An image covers the detection window top-down: row 0 is the maximum-y
edge, column 0 the minimum-x edge.  LiDAR returns paint gray pixels, the
ground-truth footprints green outlines, and detections red outlines, in
that draw order (later colors win on overlap).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import dataio
from .boxes import bev_corners
from .errors import DataError, TruncatedFile
from .geometry import GeoFence, sensor_frame, transform_to_global

POINT_GRAY = (128, 128, 128)
GT_GREEN = (0, 255, 0)
DET_RED = (255, 0, 0)


def image_shape(window: GeoFence, pixel_size: float) -> tuple[int, int]:
    h = int(np.ceil((window.y_range[1] - window.y_range[0]) / pixel_size))
    w = int(np.ceil((window.x_range[1] - window.x_range[0]) / pixel_size))
    return h, w


def to_pixel(x: float, y: float, window: GeoFence,
             pixel_size: float) -> tuple[int, int]:
    """World (x, y) -> (row, col); row 0 sits at the window's maximum y."""
    col = int(np.floor((x - window.x_range[0]) / pixel_size))
    row = int(np.floor((window.y_range[1] - y) / pixel_size))
    return row, col


def draw_line(img: np.ndarray, r0: int, c0: int, r1: int, c1: int,
              color) -> None:
    """Bresenham segment; pixels outside the image are dropped."""
    h, w = img.shape[:2]
    dr = abs(r1 - r0)
    dc = -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    while True:
        if 0 <= r0 < h and 0 <= c0 < w:
            img[r0, c0] = color
        if r0 == r1 and c0 == c1:
            return
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r0 += sr
        if e2 <= dr:
            err += dr
            c0 += sc


def draw_box_outline(img: np.ndarray, box: np.ndarray, window: GeoFence,
                     pixel_size: float, color) -> None:
    corners = bev_corners(np.asarray(box, dtype=np.float64).reshape(1, 7))[0]
    pix = [to_pixel(x, y, window, pixel_size) for x, y in corners]
    for (r0, c0), (r1, c1) in zip(pix, pix[1:] + pix[:1]):
        draw_line(img, r0, c0, r1, c1, color)


def draw_points(img: np.ndarray, xy: np.ndarray, window: GeoFence,
                pixel_size: float, color=POINT_GRAY) -> None:
    """Paint one pixel per point; points on the closed max edges clamp in."""
    h, w = img.shape[:2]
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    x0, x1 = window.x_range
    y0, y1 = window.y_range
    keep = (xy[:, 0] >= x0) & (xy[:, 0] <= x1) \
        & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    cols = np.minimum(((xy[keep, 0] - x0) / pixel_size).astype(np.int64), w - 1)
    rows = np.minimum(((y1 - xy[keep, 1]) / pixel_size).astype(np.int64), h - 1)
    img[rows, cols] = color


def bev_image(points_xy: np.ndarray, gt_boxes: np.ndarray,
              det_boxes: np.ndarray, window: GeoFence,
              pixel_size: float = 0.1) -> np.ndarray:
    """Compose the (H, W, 3) uint8 scene image: points, then gt, then dets."""
    img = np.zeros((*image_shape(window, pixel_size), 3), dtype=np.uint8)
    draw_points(img, points_xy, window, pixel_size)
    for box in np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7):
        draw_box_outline(img, box, window, pixel_size, GT_GREEN)
    for box in np.asarray(det_boxes, dtype=np.float64).reshape(-1, 7):
        draw_box_outline(img, box, window, pixel_size, DET_RED)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    """Binary portable pixmap (P6, maxval 255)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise DataError(f"not a P6 pixmap: {path}")
    try:
        w, h = (int(t) for t in parts[1].split())
    except ValueError as exc:
        raise DataError(f"bad pixmap header in {path}") from exc
    data = parts[3]
    if len(data) != h * w * 3:
        raise TruncatedFile(f"pixmap {path}: {len(data)} payload bytes, "
                            f"want {h * w * 3}")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).copy()


def render_run(cfg, split: str = "test", fid: str | None = None) -> Path:
    """Render one frame of a split into the run directory.

    Uses the sensors of the configured fusion mode for the gray cloud and
    overlays ground truth plus any detections already written for the split.
    """
    from .pipeline import _roles_and_poses  # avoid a module cycle

    root = Path(cfg.data_root)
    fids = dataio.read_manifest(root).get(split, [])
    if not fids:
        raise DataError(f"no frames in split {split!r}")
    if fid is None:
        fid = fids[0]
    if fid not in fids:
        raise DataError(f"frame {fid!r} not in split {split!r}")
    paths = dataio.frame_paths(root, split, fid)
    clouds = []
    for role, pose in _roles_and_poses(cfg, split):
        sensor_id = 0 if role == "onboard" else 1
        cloud = dataio.read_bin(paths[role], frame=sensor_frame(sensor_id))
        clouds.append(transform_to_global(cloud, pose).points[:, :2])
    gt_boxes = dataio.records_to_array(dataio.read_labels(paths["label"]))
    det_path = Path(cfg.run_dir) / "detections" / split / f"{fid}.txt"
    det_boxes = (dataio.records_to_array(dataio.read_labels(det_path))
                 if det_path.exists() else np.zeros((0, 7)))
    img = bev_image(np.concatenate(clouds), gt_boxes, det_boxes,
                    cfg.window(), cfg.render_pixel_size)
    out = Path(cfg.run_dir) / "render" / f"{split}_{fid}.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, img)
    return out
