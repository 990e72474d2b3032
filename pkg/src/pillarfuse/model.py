"""Network trunk and detection head over the fused BEV grid.

The backbone is a three-block strided conv stack whose per-block outputs are
deconvolved back to half the input resolution and concatenated channel-wise.
The head places a fixed anchor set at every output cell (per class, two
orientations) and regresses class logits, box deltas and a 2-bin direction
flag with plain 1x1 convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import bev_corners, decode_deltas, direction_bin, encode_deltas
from .errors import ShapeMismatch
from .fusion import gff_fuse_t, scatter_t
from .metrics import corners_iou, iou_matrix
from .nn import layers as L
from .nn import tensor as T
from .pillars import PillarEncoder, PillarSet, VoxelSpec, encode

CLASS_NAMES = ("car", "pedestrian")
ANCHOR_YAWS = (0.0, np.pi / 2)
HEAD_STRIDE = 2


@dataclass(frozen=True)
class ClassAnchor:
    name: str
    size: tuple  # (w, l, h)
    z_center: float
    pos_iou: float
    neg_iou: float


DEFAULT_ANCHORS = (
    ClassAnchor("car", (1.9, 4.6, 1.7), 0.85, 0.60, 0.45),
    ClassAnchor("pedestrian", (0.38, 0.38, 1.8), 0.90, 0.35, 0.20),
)


@dataclass
class BackboneSpec:
    in_channels: int = 64
    block_layers: tuple = (4, 6, 6)
    block_channels: tuple = (64, 128, 256)
    up_channels: int = 128

    def __post_init__(self):
        if len(self.block_layers) != len(self.block_channels):
            raise ShapeMismatch("block_layers and block_channels disagree")

    @property
    def out_channels(self) -> int:
        return self.up_channels * len(self.block_layers)


class ConvBlock(L.Module):
    """Conv -> batch norm -> ReLU."""

    def __init__(self, rng, c_in, c_out, kernel, stride, padding):
        super().__init__()
        self.conv = L.Conv2d(c_in, c_out, kernel, rng, stride=stride,
                             padding=padding, bias=False)
        self.norm = L.BatchNorm(c_out)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class DeconvBlock(L.Module):
    """Transposed conv -> batch norm -> ReLU; exact integer upsampling."""

    def __init__(self, rng, c_in, c_out, factor):
        super().__init__()
        if factor == 1:
            kernel, stride, padding = 3, 1, 1
        else:
            kernel, stride, padding = factor, factor, 0
        self.conv = L.ConvTranspose2d(c_in, c_out, kernel, rng, stride=stride,
                                      padding=padding, bias=False)
        self.norm = L.BatchNorm(c_out)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class Backbone(L.Module):
    """Strided conv pyramid with upsampled, concatenated block outputs."""

    def __init__(self, rng: np.random.Generator, spec: BackboneSpec | None = None):
        super().__init__()
        self.spec = spec or BackboneSpec()
        self.blocks = L.ModuleList()
        c_in = self.spec.in_channels
        for n_layers, c_out in zip(self.spec.block_layers, self.spec.block_channels):
            block = L.ModuleList()
            for i in range(n_layers):
                block.append(ConvBlock(rng, c_in if i == 0 else c_out, c_out,
                                       kernel=3, stride=2 if i == 0 else 1,
                                       padding=1))
            self.blocks.append(block)
            c_in = c_out
        self.ups = L.ModuleList(
            DeconvBlock(rng, c, self.spec.up_channels, factor=2 ** b)
            for b, c in enumerate(self.spec.block_channels))

    def forward(self, x: T.Tensor) -> T.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(
                f"expected (B, {self.spec.in_channels}, H, W), got {x.shape}")
        div = 2 ** len(self.spec.block_layers)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeMismatch(f"spatial size {x.shape[2:]} not divisible by {div}")
        streams = []
        h = x
        for block, up in zip(self.blocks, self.ups):
            for layer in block:
                h = layer(h)
            streams.append(up(h))
        return T.concat(streams, axis=1)


class DetectionHead(L.Module):
    """Three parallel 1x1 conv maps: class logits, box deltas, direction bins.

    Class-logit biases start at the usual focal-loss prior (1% foreground)
    so early training is not swamped by the negative anchors.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int,
                 n_cell_anchors: int = 4, n_classes: int = 2):
        super().__init__()
        self.n_cell_anchors = n_cell_anchors
        self.n_classes = n_classes
        self.in_channels = in_channels
        self.cls = L.Conv2d(in_channels, n_cell_anchors * n_classes, 1, rng)
        self.box = L.Conv2d(in_channels, n_cell_anchors * 7, 1, rng)
        self.dir = L.Conv2d(in_channels, n_cell_anchors * 2, 1, rng)
        self.cls.bias.data[...] = -np.log(99.0)

    def forward(self, x: T.Tensor) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected (B, {self.in_channels}, H, W), got {x.shape}")
        return self.cls(x), self.box(x), self.dir(x)


def anchor_grid(spec: VoxelSpec, anchors: tuple = DEFAULT_ANCHORS,
                yaws: tuple = ANCHOR_YAWS,
                stride: int = HEAD_STRIDE) -> tuple[np.ndarray, np.ndarray]:
    """All anchors over the head grid, row-major cells then per-cell index.

    Returns (boxes (N,7), class_idx (N,)).  The per-cell ordering is
    class-major then yaw, matching the head's channel layout.
    """
    if spec.H % stride or spec.W % stride:
        raise ShapeMismatch(f"grid {spec.H}x{spec.W} not divisible by {stride}")
    h, w = spec.H // stride, spec.W // stride
    xs = spec.window.x_range[0] + (np.arange(w) + 0.5) * spec.dx * stride
    ys = spec.window.y_range[0] + (np.arange(h) + 0.5) * spec.dy * stride
    a_cell = len(anchors) * len(yaws)
    boxes = np.zeros((h, w, a_cell, 7))
    cls_idx = np.zeros(a_cell, dtype=np.int64)
    for ci, ca in enumerate(anchors):
        for yi, yaw in enumerate(yaws):
            a = ci * len(yaws) + yi
            boxes[:, :, a, 0] = xs[None, :]
            boxes[:, :, a, 1] = ys[:, None]
            boxes[:, :, a, 2] = ca.z_center
            boxes[:, :, a, 3:6] = ca.size
            boxes[:, :, a, 6] = yaw
            cls_idx[a] = ci
    return boxes.reshape(-1, 7), np.tile(cls_idx, h * w)


def flatten_head_map(m: np.ndarray, n_fields: int) -> np.ndarray:
    """(A*F, h, w) map -> (h*w*A, F) rows in anchor-grid order."""
    a_f, h, w = m.shape
    a = a_f // n_fields
    return m.reshape(a, n_fields, h, w).transpose(2, 3, 0, 1).reshape(-1, n_fields)


def flatten_head_maps_t(m: T.Tensor, n_fields: int) -> T.Tensor:
    """Differentiable flatten_head_map over a whole batch.

    (B, A*F, h, w) -> (B*h*w*A, F); per-frame blocks follow anchor-grid
    order, so frame b's anchor rows start at b * h * w * A.
    """
    b, a_f, h, w = m.shape
    a = a_f // n_fields
    x = T.reshape(m, (b, a, n_fields, h, w))
    x = T.transpose(x, (0, 3, 4, 1, 2))
    return T.reshape(x, (b * h * w * a, n_fields))


POSITIVE, IGNORE, NEGATIVE = 1, 0, -1


def match_anchors(anchor_boxes: np.ndarray, anchor_classes: np.ndarray,
                  gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  anchors: tuple = DEFAULT_ANCHORS) -> tuple[np.ndarray, np.ndarray]:
    """Assign {positive, ignore, negative} states per anchor, class-restricted.

    An anchor is positive if its best same-class BEV IoU clears the class
    positive threshold, negative below the negative threshold, ignore in
    between.  Each gt additionally forces its own best-IoU anchor positive
    (if that IoU is nonzero and the anchor is not positive already).  Ties
    resolve to the lower index.

    Returns (states (N,), gt_ids (N,)); gt_ids is -1 off the positives.
    """
    n = len(anchor_boxes)
    states = np.full(n, NEGATIVE, dtype=np.int64)
    gt_ids = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    gt_classes = np.asarray(gt_classes)
    for ci, ca in enumerate(anchors):
        a_sel = np.nonzero(anchor_classes == ci)[0]
        g_sel = np.nonzero(gt_classes == ci)[0]
        if not len(a_sel) or not len(g_sel):
            continue
        ious = iou_matrix(anchor_boxes[a_sel], gt_boxes[g_sel])
        best_g = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(len(a_sel)), best_g]
        pos = best_iou >= ca.pos_iou
        mid = (~pos) & (best_iou >= ca.neg_iou)
        states[a_sel[pos]] = POSITIVE
        states[a_sel[mid]] = IGNORE
        gt_ids[a_sel[pos]] = g_sel[best_g[pos]]
        for k, g in enumerate(g_sel):
            j = int(np.argmax(ious[:, k]))
            if ious[j, k] > 0.0 and states[a_sel[j]] != POSITIVE:
                states[a_sel[j]] = POSITIVE
                gt_ids[a_sel[j]] = g
    return states, gt_ids


def build_targets(anchor_boxes: np.ndarray, anchor_classes: np.ndarray,
                  gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  anchors: tuple = DEFAULT_ANCHORS):
    """Matching plus regression/direction targets for one frame.

    Returns (states, loc_targets (N,7), dir_targets (N,), labels (N,)).
    Rows off the positives are zero-filled; labels are the anchors' own
    class indices (matching is class-restricted, so they agree with any
    assigned gt).
    """
    states, gt_ids = match_anchors(anchor_boxes, anchor_classes,
                                   gt_boxes, gt_classes, anchors)
    n = len(anchor_boxes)
    loc = np.zeros((n, 7))
    dirs = np.zeros(n, dtype=np.int64)
    pos = states == POSITIVE
    if pos.any():
        matched = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)[gt_ids[pos]]
        loc[pos] = encode_deltas(matched, anchor_boxes[pos])
        dirs[pos] = direction_bin(matched, anchor_boxes[pos])
    return states, loc, dirs, np.asarray(anchor_classes, dtype=np.int64)


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
        iou_threshold: float = 0.5, score_threshold: float = 0.1,
        max_detections: int = 100) -> np.ndarray:
    """Greedy per-class suppression; returns kept indices in score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.array([i for i in np.argsort(-scores, kind="stable")
                      if scores[i] >= score_threshold], dtype=np.int64)
    keep: list[int] = []
    dead = np.zeros(len(boxes), dtype=bool)
    rad = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    corners = bev_corners(boxes) if len(boxes) else np.zeros((0, 4, 2))
    areas = boxes[:, 3] * boxes[:, 4]
    for i in order:
        if dead[i]:
            continue
        keep.append(int(i))
        if len(keep) == max_detections:
            break
        # disjoint circumcircles cannot overlap, so skip their exact IoU
        near = order[~dead[order] & (order != i) & (classes[order] == classes[i])
                     & (np.hypot(boxes[order, 0] - boxes[i, 0],
                                 boxes[order, 1] - boxes[i, 1])
                        <= rad[order] + rad[i])]
        for j in near:
            if corners_iou(corners[i], corners[j], areas[i], areas[j]) \
                    > iou_threshold:
                dead[j] = True
    return np.array(keep, dtype=np.int64)


def decode_frame(cls_map: np.ndarray, box_map: np.ndarray, dir_map: np.ndarray,
                 anchor_boxes: np.ndarray, anchor_classes: np.ndarray,
                 score_threshold: float = 0.1, iou_threshold: float = 0.5,
                 max_detections: int = 100):
    """Head maps for one frame -> final detections after NMS.

    Each anchor is scored by the sigmoid of its own class's logit; the box
    comes from decoding its deltas with the argmax direction bin.  Returns
    (boxes (M,7), class_idx (M,), scores (M,)).
    """
    n_classes = cls_map.shape[0] // (dir_map.shape[0] // 2)
    logits = flatten_head_map(np.asarray(cls_map, dtype=np.float64), n_classes)
    deltas = flatten_head_map(np.asarray(box_map, dtype=np.float64), 7)
    dir_logits = flatten_head_map(np.asarray(dir_map, dtype=np.float64), 2)
    own = logits[np.arange(len(logits)), anchor_classes]
    scores = 1.0 / (1.0 + np.exp(-own))
    cand = np.nonzero(scores >= score_threshold)[0]
    if not len(cand):
        return np.zeros((0, 7)), np.zeros(0, dtype=np.int64), np.zeros(0)
    bins = np.argmax(dir_logits[cand], axis=1)
    boxes = decode_deltas(anchor_boxes[cand], deltas[cand], bins)
    keep = nms(boxes, scores[cand], anchor_classes[cand],
               iou_threshold, score_threshold, max_detections)
    return boxes[keep], np.asarray(anchor_classes)[cand[keep]], scores[cand][keep]


class DetectorNet(L.Module):
    """End-to-end net: pillar encoder, scatter, max-fusion, backbone, head."""

    def __init__(self, rng: np.random.Generator, voxel_spec: VoxelSpec,
                 pillar_channels: int = 64,
                 backbone: BackboneSpec | None = None,
                 anchors: tuple = DEFAULT_ANCHORS,
                 yaws: tuple = ANCHOR_YAWS):
        super().__init__()
        self.voxel_spec = voxel_spec
        self.anchors = anchors
        self.encoder = PillarEncoder(rng, out_dim=pillar_channels)
        self.backbone = Backbone(rng, backbone or BackboneSpec(in_channels=pillar_channels))
        if self.backbone.spec.in_channels != pillar_channels:
            raise ShapeMismatch("backbone input width must match pillar channels")
        self.head = DetectionHead(rng, self.backbone.spec.out_channels,
                                  n_cell_anchors=len(anchors) * len(yaws),
                                  n_classes=len(anchors))
        self.anchor_boxes, self.anchor_classes = anchor_grid(
            voxel_spec, anchors, yaws, HEAD_STRIDE)

    def _encoded_grids(self, frames: list[list[PillarSet]]) -> list[list[T.Tensor]]:
        """Per-sensor feature grids, with one encoder pass for the whole batch.

        Pillar columns of every non-empty sensor are concatenated so the
        encoder (and its batch-norm statistics, in training mode) sees the
        batch at once, then sliced back apart and scattered per sensor.
        """
        nonempty = [ps for sensors in frames for ps in sensors if ps.P > 0]
        encoded = None
        if nonempty:
            merged = PillarSet(
                np.concatenate([ps.features for ps in nonempty], axis=1),
                np.concatenate([ps.cell_index for ps in nonempty], axis=0),
                np.concatenate([ps.counts for ps in nonempty]),
                self.voxel_spec)
            encoded = encode(merged, self.encoder, self.training)
        zeros_shape = (self.encoder.out_dim, self.voxel_spec.H, self.voxel_spec.W)
        grids = []
        start = 0
        for sensors in frames:
            row = []
            for ps in sensors:
                if ps.P == 0:
                    row.append(T.Tensor(np.zeros(zeros_shape,
                                                 dtype=T.default_dtype())))
                    continue
                cols = T.narrow(encoded, 1, start, ps.P)
                start += ps.P
                row.append(scatter_t(cols, ps.cell_index, self.voxel_spec))
            grids.append(row)
        return grids

    def fuse_frame(self, sensors: list[PillarSet]) -> T.Tensor:
        """Encode each sensor's pillars, scatter to grids, take the max."""
        return gff_fuse_t(self._encoded_grids([sensors])[0])

    def forward(self, frames: list[list[PillarSet]]):
        """Batch of frames (each a per-sensor pillar list) -> head maps."""
        grids = self._encoded_grids(frames)
        fused = T.stack([gff_fuse_t(row) for row in grids], axis=0)
        return self.head(self.backbone(fused))
