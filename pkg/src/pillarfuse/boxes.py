"""Oriented 3D box arithmetic: residual encoding, decoding, corner geometry.

Boxes are (N, 7) float64 arrays ordered (x, y, z, w, l, h, yaw): center,
width across the heading, length along it, height, and heading angle around
global up.  Residuals against anchors follow the normalized-delta scheme:
positions scale by the anchor diagonal (or height for z), sizes are log
ratios, and the angle residual is sin(gt - anchor), whose half-turn
ambiguity the direction bin resolves.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteDelta
from .geometry import wrap_angle


def anchor_diag(anchors: np.ndarray) -> np.ndarray:
    """Planar diagonal sqrt(w^2 + l^2) used to normalize x/y residuals."""
    anchors = np.asarray(anchors)
    return np.sqrt(anchors[..., 3] ** 2 + anchors[..., 4] ** 2)


def encode_deltas(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Per-box regression targets (dx, dy, dz, dw, dl, dh, dtheta)."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    d = anchor_diag(anchors)
    out = np.empty(np.broadcast_shapes(gt.shape, anchors.shape))
    out[..., 0] = (gt[..., 0] - anchors[..., 0]) / d
    out[..., 1] = (gt[..., 1] - anchors[..., 1]) / d
    out[..., 2] = (gt[..., 2] - anchors[..., 2]) / anchors[..., 5]
    out[..., 3] = np.log(gt[..., 3] / anchors[..., 3])
    out[..., 4] = np.log(gt[..., 4] / anchors[..., 4])
    out[..., 5] = np.log(gt[..., 5] / anchors[..., 5])
    out[..., 6] = np.sin(gt[..., 6] - anchors[..., 6])
    return out


def direction_bin(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """1 where the box faces opposite its anchor (residual beyond a quarter
    turn either way), else 0.  This is the half-turn bit the sine residual
    cannot carry."""
    res = np.asarray(gt)[..., 6] - np.asarray(anchors)[..., 6]
    return (np.cos(res) < 0.0).astype(np.int64)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray,
                  dir_bins: np.ndarray | None = None) -> np.ndarray:
    """Invert :func:`encode_deltas`; flips yaw by pi where dir_bins is 1.

    Raises:
        NonFiniteDelta: any delta is NaN or infinite.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise NonFiniteDelta("regression deltas contain NaN or Inf")
    d = anchor_diag(anchors)
    out = np.empty(np.broadcast_shapes(anchors.shape, deltas.shape))
    out[..., 0] = deltas[..., 0] * d + anchors[..., 0]
    out[..., 1] = deltas[..., 1] * d + anchors[..., 1]
    out[..., 2] = deltas[..., 2] * anchors[..., 5] + anchors[..., 2]
    out[..., 3] = anchors[..., 3] * np.exp(deltas[..., 3])
    out[..., 4] = anchors[..., 4] * np.exp(deltas[..., 4])
    out[..., 5] = anchors[..., 5] * np.exp(deltas[..., 5])
    theta = anchors[..., 6] + np.arcsin(np.clip(deltas[..., 6], -1.0, 1.0))
    if dir_bins is not None:
        theta = theta + np.pi * np.asarray(dir_bins)
    out[..., 6] = wrap_angle(theta)
    return out


def bev_corners(boxes: np.ndarray) -> np.ndarray:
    """(N, 4, 2) footprint corners, counter-clockwise starting front-left.

    The local frame puts +x along the heading (length) and +y to the left
    (width); corners rotate by yaw and translate to the center.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    w = boxes[:, 3]
    l = boxes[:, 4]
    local = np.stack([
        np.stack([l / 2, w / 2], axis=1),
        np.stack([-l / 2, w / 2], axis=1),
        np.stack([-l / 2, -w / 2], axis=1),
        np.stack([l / 2, -w / 2], axis=1),
    ], axis=1)
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    rot = np.stack([np.stack([c, -s], axis=1),
                    np.stack([s, c], axis=1)], axis=1)
    return np.einsum("nij,nkj->nki", rot, local) + boxes[:, None, :2]


def z_interval(boxes: np.ndarray) -> np.ndarray:
    """(N, 2) vertical extent (bottom, top) from center-z and height."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    half = boxes[:, 5] / 2
    return np.stack([boxes[:, 2] - half, boxes[:, 2] + half], axis=1)


def contains_points_bev(box: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Boolean mask of planar points inside one box footprint (closed edges)."""
    box = np.asarray(box, dtype=np.float64).reshape(7)
    rel = np.asarray(xy, dtype=np.float64) - box[:2]
    c, s = np.cos(box[6]), np.sin(box[6])
    along = rel[:, 0] * c + rel[:, 1] * s
    across = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(along) <= box[4] / 2) & (np.abs(across) <= box[3] / 2)


def contains_points(box: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    """Boolean mask of 3D points inside one oriented box."""
    box = np.asarray(box, dtype=np.float64).reshape(7)
    inside = contains_points_bev(box, np.asarray(xyz)[:, :2])
    z = np.asarray(xyz)[:, 2]
    return inside & (np.abs(z - box[2]) <= box[5] / 2)
