"""Pillar voxelization, 9-D point feature augmentation, and the learned encoder.

A pillar is one vertical column of the BEV grid holding up to N points.  The
feature layout per point is (x, y, z, i, xc, yc, zc, xp, yp): raw coordinates
and intensity, offsets to the pillar's point mean, and planar offsets to the
cell center.  The encoder is a pointwise linear map plus batch normalization
over the channel axis, compressed per pillar by a channel-wise max that masks
out padded slots.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfWindow, ShapeMismatch, TruncatedFile
from .geometry import GLOBAL, GeoFence, PointCloud
from .nn import layers as L
from .nn import tensor as T

D_FEATURES = 9
DEFAULT_N_MAX = 32
DEFAULT_P_MAX = 12000


@dataclass
class VoxelSpec:
    """Grid geometry: cell sizes, window, and derived (H, W) cell counts."""

    dx: float = 0.2
    dy: float = 0.2
    dz: float = 5.0
    window: GeoFence = field(default_factory=lambda: GeoFence(
        (-51.2, 51.2), (-51.2, 51.2), (-5.0, 0.0)))
    H: int = field(init=False)
    W: int = field(init=False)

    def __post_init__(self):
        sx, sy, sz = self.window.spans
        w = sx / self.dx
        h = sy / self.dy
        if abs(w - round(w)) > 1e-9 or abs(h - round(h)) > 1e-9:
            raise ShapeMismatch(
                f"window spans ({sx}, {sy}) are not integer multiples of "
                f"voxel edges ({self.dx}, {self.dy})")
        if abs(sz - self.dz) > 1e-9:
            raise ShapeMismatch(f"dz={self.dz} must equal the z-span {sz} (single cell)")
        self.W = int(round(w))
        self.H = int(round(h))

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map (N, 2) planar coordinates to (row, col); hi-edge clamps inward."""
        col = np.floor((xy[:, 0] - self.window.x_range[0]) / self.dx).astype(np.int64)
        row = np.floor((xy[:, 1] - self.window.y_range[0]) / self.dy).astype(np.int64)
        return np.minimum(row, self.H - 1), np.minimum(col, self.W - 1)

    def cell_center(self, row: np.ndarray, col: np.ndarray) -> np.ndarray:
        cx = self.window.x_range[0] + (np.asarray(col) + 0.5) * self.dx
        cy = self.window.y_range[0] + (np.asarray(row) + 0.5) * self.dy
        return np.stack([cx, cy], axis=-1)


@dataclass
class PillarSet:
    """Fixed-capacity pillar tensor (D, P, N) with per-pillar cell and count."""

    features: np.ndarray
    cell_index: np.ndarray
    counts: np.ndarray
    spec: VoxelSpec

    @property
    def P(self) -> int:
        return self.features.shape[1]

    @property
    def N(self) -> int:
        return self.features.shape[2]

    def slot_mask(self) -> np.ndarray:
        """(P, N) True where a real point occupies the slot."""
        return np.arange(self.N)[None, :] < self.counts[:, None]


def voxelize(cloud: PointCloud, spec: VoxelSpec, n_max: int = DEFAULT_N_MAX,
             p_max: int = DEFAULT_P_MAX, seed: int = 0) -> PillarSet:
    """Group a geo-fenced global cloud into pillars keyed by grid cell.

    Pillars are ordered by ascending cell key (row-major).  Overfull pillars
    are subsampled to n_max with a per-cell seeded draw; if more than p_max
    cells are hit, the most populous pillars win (ties to the lower key).

    Raises:
        OutOfWindow: some point violates the geo-fence precondition.
    """
    pts = cloud.points
    if len(pts) and not np.all(spec.window.contains(pts[:, :3])):
        raise OutOfWindow("voxelize requires a geo-fenced cloud")
    if len(pts) == 0:
        return PillarSet(np.zeros((D_FEATURES, 0, n_max)),
                         np.zeros((0, 2), dtype=np.int64),
                         np.zeros(0, dtype=np.int64), spec)
    row, col = spec.cell_of(pts[:, :2])
    key = row * spec.W + col
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    if len(uniq) > p_max:
        # most populous first, ties to the lower key; kept set back in key order
        order = np.lexsort((uniq, -counts))[:p_max]
        keep_keys = np.sort(uniq[order])
        remap = np.full(len(uniq), -1, dtype=np.int64)
        remap[np.searchsorted(uniq, keep_keys)] = np.arange(p_max)
        sel = remap[inverse] >= 0
        pts, inverse = pts[sel], remap[inverse][sel]
        uniq = keep_keys
        counts = np.bincount(inverse, minlength=p_max)
    p = len(uniq)
    order = np.argsort(inverse, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    feats = np.zeros((D_FEATURES, p, n_max))
    out_counts = np.zeros(p, dtype=np.int64)
    for j in range(p):
        idx = order[bounds[j]:bounds[j + 1]]
        if len(idx) > n_max:
            rng = np.random.default_rng([seed, int(uniq[j])])
            idx = idx[np.sort(rng.choice(len(idx), n_max, replace=False))]
        out_counts[j] = len(idx)
        feats[:4, j, :len(idx)] = pts[idx].T
    cell = np.stack([uniq // spec.W, uniq % spec.W], axis=1)
    return PillarSet(feats, cell, out_counts, spec)


def augment_features(pillars: PillarSet, spec: VoxelSpec) -> PillarSet:
    """Fill feature rows 4..8 with mean offsets and cell-center offsets."""
    f = pillars.features
    mask = pillars.slot_mask()
    n_real = np.maximum(pillars.counts, 1)[None, :, None]
    mean = (f[:3] * mask).sum(axis=2, keepdims=True) / n_real
    centers = spec.cell_center(pillars.cell_index[:, 0], pillars.cell_index[:, 1])
    out = f.copy()
    out[4:7] = (f[:3] - mean) * mask
    out[7] = (f[0] - centers[:, 0][:, None]) * mask
    out[8] = (f[1] - centers[:, 1][:, None]) * mask
    return PillarSet(out, pillars.cell_index, pillars.counts, spec)


class PillarEncoder(L.Module):
    """Linear D->C map with channel batch-norm; bypassable for identity tests."""

    def __init__(self, rng: np.random.Generator, in_dim: int = D_FEATURES,
                 out_dim: int = 64, use_batch_norm: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.use_batch_norm = use_batch_norm
        self.linear = L.Linear(in_dim, out_dim, rng)
        self.norm = L.BatchNorm(out_dim) if use_batch_norm else None

    def forward(self, feats: T.Tensor, starts: np.ndarray) -> T.Tensor:
        """(M, D) packed points -> (C, P): pointwise encode, normalize, pillar max.

        Rows hold the real points of every pillar back to back and ``starts``
        marks each pillar's first row, so padding never enters the math:
        batch statistics and the channel max see real points only.
        """
        h = self.linear(feats)                             # (M, C)
        if self.norm is not None:
            h = self.norm(h)
        return T.transpose(T.segment_max(h, starts), (1, 0))


def encode(pillars: PillarSet, enc: PillarEncoder, training: bool) -> T.Tensor:
    """Run the encoder over a PillarSet in train or infer statistics mode."""
    if pillars.features.shape[0] != enc.in_dim:
        raise ShapeMismatch(
            f"encoder expects D={enc.in_dim}, got {pillars.features.shape[0]}")
    enc.train() if training else enc.eval()
    packed = pillars.features[:, pillars.slot_mask()].T
    if packed.shape[0] == 0:
        return T.Tensor(np.zeros((enc.out_dim, pillars.P), dtype=T.default_dtype()))
    starts = np.concatenate([[0], np.cumsum(pillars.counts[:-1])])
    feats = T.Tensor(packed.astype(T.default_dtype(), order="C", copy=False))
    return enc(feats, starts)


# ---------------------------------------------------------------------------
# compressed feature frames (the payload a sensor would transmit)
# ---------------------------------------------------------------------------

def payload_nbytes(c: int, p: int) -> int:
    """Serialized size of a (C, P) feature frame: 10-byte header + P records."""
    return 10 + p * (4 + 4 * c)


def write_feature_frame(path, sensor_id: int, features: np.ndarray,
                        cell_index: np.ndarray) -> None:
    """Write header (sensor_id u32, C u16, P u32) then (row u16, col u16, C f32)."""
    features = np.asarray(features)
    c, p = features.shape
    cell_index = np.asarray(cell_index, dtype=np.int64).reshape(p, 2)
    if cell_index.size and (cell_index.min() < 0 or cell_index.max() > 0xFFFF):
        raise ShapeMismatch("cell indices exceed u16 range")
    with open(path, "wb") as f:
        f.write(struct.pack("<IHI", sensor_id, c, p))
        payload = np.empty((p, 4 + 4 * c), dtype=np.uint8)
        payload[:, :4] = cell_index.astype("<u2").view(np.uint8).reshape(p, 4)
        payload[:, 4:] = np.ascontiguousarray(features.T, dtype="<f4") \
            .view(np.uint8).reshape(p, 4 * c)
        f.write(payload.tobytes())


def read_feature_frame(path) -> tuple[int, np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(10)
        if len(head) != 10:
            raise TruncatedFile("feature frame shorter than its header")
        sensor_id, c, p = struct.unpack("<IHI", head)
        body = f.read()
    expect = p * (4 + 4 * c)
    if len(body) != expect:
        raise TruncatedFile(f"feature frame body {len(body)} bytes, expected {expect}")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(p, 4 + 4 * c)
    cell = raw[:, :4].copy().view("<u2").astype(np.int64)
    feats = raw[:, 4:].copy().view("<f4").reshape(p, c).T.copy()
    return sensor_id, feats, cell
