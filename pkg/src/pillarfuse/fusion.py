"""Grid-wise feature fusion: scatter pillar features onto one shared BEV grid
per sensor, then reduce across sensors with an elementwise max.

All sensors share a single axis-aligned global window, so cell (r, c) means
the same patch of ground in every grid and the fusion is a plain cell-on-cell
max.  Empty cells hold 0.0; the occupancy mask records which cells actually
received a pillar so downstream code can tell "empty" from "feature happens
to be zero".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DuplicateCell, IndexOutOfRange, ShapeMismatch, WindowMismatch
from .geometry import GeoFence
from .nn import tensor as T
from .pillars import VoxelSpec

FILL_VALUE = 0.0


@dataclass
class FeatureGrid:
    """Dense (C, H, W) float feature image over a global window."""

    data: np.ndarray
    window: GeoFence
    occupancy: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _check_cells(cell_index: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cell_index = np.asarray(cell_index, dtype=np.int64).reshape(-1, 2)
    rows, cols = cell_index[:, 0], cell_index[:, 1]
    if len(rows):
        if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
            raise IndexOutOfRange(f"cell index outside {h}x{w} grid")
        keys = rows * w + cols
        if len(np.unique(keys)) != len(keys):
            raise DuplicateCell("two pillars map to the same grid cell")
    return rows, cols


def scatter(features: np.ndarray, cell_index: np.ndarray,
            spec: VoxelSpec) -> FeatureGrid:
    """Place (C, P) pillar features at their cells of an all-fill (C, H, W) grid."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be (C, P), got {features.shape}")
    c, p = features.shape
    rows, cols = _check_cells(cell_index, spec.H, spec.W)
    if len(rows) != p:
        raise ShapeMismatch(f"{p} pillars but {len(rows)} cell indices")
    data = np.full((c, spec.H, spec.W), FILL_VALUE, dtype=features.dtype)
    occupancy = np.zeros((spec.H, spec.W), dtype=bool)
    if p:
        data[:, rows, cols] = features
        occupancy[rows, cols] = True
    return FeatureGrid(data, spec.window, occupancy)


def gff_fuse(grids: list[FeatureGrid]) -> FeatureGrid:
    """Cell-on-cell max over F grids; occupancy is the union."""
    if not grids:
        raise ShapeMismatch("gff_fuse needs at least one grid")
    first = grids[0]
    for g in grids[1:]:
        if g.shape != first.shape:
            raise ShapeMismatch(f"grid shapes differ: {g.shape} vs {first.shape}")
        if g.window != first.window:
            raise WindowMismatch(f"grid windows differ: {g.window} vs {first.window}")
    data = first.data
    occ = first.occupancy
    for g in grids[1:]:
        data = np.maximum(data, g.data)
        occ = occ | g.occupancy
    return FeatureGrid(data.copy() if len(grids) == 1 else data,
                       first.window, occ.copy() if len(grids) == 1 else occ)


def scatter_t(features: T.Tensor, cell_index: np.ndarray,
              spec: VoxelSpec) -> T.Tensor:
    """Differentiable scatter: same placement as :func:`scatter` on the graph."""
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be (C, P), got {features.shape}")
    rows, cols = _check_cells(cell_index, spec.H, spec.W)
    if len(rows) != features.shape[1]:
        raise ShapeMismatch(
            f"{features.shape[1]} pillars but {len(rows)} cell indices")
    return T.scatter_columns(features, rows, cols, spec.H, spec.W)


def gff_fuse_t(grids: list[T.Tensor]) -> T.Tensor:
    """Differentiable fuse; gradient goes to the argmax sensor, ties to lowest."""
    if not grids:
        raise ShapeMismatch("gff_fuse needs at least one grid")
    if len(grids) == 1:
        return grids[0]
    return T.stack_max(grids)
