"""Detection metrics: rotated-box IoU (BEV and 3D), per-class AP/AR, mAP.

IoU of rotated footprints goes through Sutherland-Hodgman clipping of one
convex quadrilateral by the other and the shoelace area, all in float64.
AP uses all-point interpolation over precision-recall points taken at
distinct-score boundaries, which makes the curve independent of tie order
and exactly reproducible by enumerating score thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import bev_corners, z_interval
from .errors import DegenerateBox

DEFAULT_IOU_THRESHOLDS = {"car": 0.50, "pedestrian": 0.25}


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(
        default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))
    benchmark: str = "bev"  # "bev" or "3d"

    def __post_init__(self):
        for name, t in self.iou_thresholds.items():
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU threshold for {name} must be in (0, 1]")
        if self.benchmark not in ("bev", "3d"):
            raise ValueError(f"unknown benchmark {self.benchmark!r}")


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip a convex polygon by a convex CCW polygon (Sutherland-Hodgman)."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0])
        for cur in inp:
            cur_side = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0])
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    out.append(prev + t * (cur - prev))
                out.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                out.append(prev + t * (cur - prev))
            prev, prev_side = cur, cur_side
    return np.array(out) if out else np.zeros((0, 2))


def _corner_intersection(ca: np.ndarray, cb: np.ndarray) -> float:
    inter = _clip_polygon(ca, cb)
    if len(inter) < 3:
        return 0.0
    return abs(_polygon_area(inter))


def _footprint_intersection(a: np.ndarray, b: np.ndarray) -> float:
    ca = bev_corners(a.reshape(1, 7))[0]
    cb = bev_corners(b.reshape(1, 7))[0]
    return _corner_intersection(ca, cb)


def corners_iou(ca: np.ndarray, cb: np.ndarray,
                area_a: float, area_b: float) -> float:
    """Rotated-rectangle IoU from precomputed footprint corners and areas.

    Saves recomputing corners when one box is compared against many, as in
    suppression loops.

    Raises:
        DegenerateBox: if either footprint area is zero.
    """
    if area_a == 0.0 or area_b == 0.0:
        raise DegenerateBox(f"zero footprint area: {area_a}, {area_b}")
    inter = _corner_intersection(ca, cb)
    union = area_a + area_b - inter
    return min(max(inter / union, 0.0), 1.0)


def _check_box(box: np.ndarray) -> None:
    if box[3] * box[4] == 0.0:
        raise DegenerateBox(f"zero footprint: w={box[3]}, l={box[4]}")


def bev_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Rotated-rectangle IoU of two box footprints."""
    a = np.asarray(a, dtype=np.float64).reshape(7)
    b = np.asarray(b, dtype=np.float64).reshape(7)
    _check_box(a)
    _check_box(b)
    inter = _footprint_intersection(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: np.ndarray, b: np.ndarray) -> float:
    """Volume IoU: footprint intersection times vertical overlap, over union."""
    a = np.asarray(a, dtype=np.float64).reshape(7)
    b = np.asarray(b, dtype=np.float64).reshape(7)
    _check_box(a)
    _check_box(b)
    inter_area = _footprint_intersection(a, b)
    za = z_interval(a.reshape(1, 7))[0]
    zb = z_interval(b.reshape(1, 7))[0]
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    inter = inter_area * max(dz, 0.0)
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray,
               benchmark: str = "bev") -> np.ndarray:
    """(Na, Nb) pairwise IoU with a center-distance prefilter."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    fn = bev_iou if benchmark == "bev" else iou_3d
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ra = np.hypot(boxes_a[:, 3], boxes_a[:, 4]) / 2
    rb = np.hypot(boxes_b[:, 3], boxes_b[:, 4]) / 2
    dist = np.hypot(boxes_a[:, None, 0] - boxes_b[None, :, 0],
                    boxes_a[:, None, 1] - boxes_b[None, :, 1])
    near = dist <= ra[:, None] + rb[None, :] + 1e-9
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = fn(boxes_a[i], boxes_b[j])
    return out


def _greedy_match(det_boxes: np.ndarray, det_scores: np.ndarray,
                  gt_boxes: np.ndarray, threshold: float,
                  benchmark: str) -> tuple[np.ndarray, np.ndarray]:
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    tp = np.zeros(len(det_boxes), dtype=bool)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    if not len(det_boxes):
        return tp, taken
    order = np.argsort(-np.asarray(det_scores), kind="stable")
    ious = iou_matrix(det_boxes, gt_boxes, benchmark)
    for i in order:
        best_j, best_iou = -1, threshold
        for j in range(len(gt_boxes)):
            if not taken[j] and ious[i, j] >= best_iou and \
                    (best_j < 0 or ious[i, j] > best_iou):
                best_j, best_iou = j, ious[i, j]
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp, taken


def match_frame(det_boxes: np.ndarray, det_scores: np.ndarray,
                gt_boxes: np.ndarray, threshold: float,
                benchmark: str = "bev") -> np.ndarray:
    """Greedy per-frame matching: best unmatched gt per detection, score order.

    Returns a bool TP flag per detection (in the input detection order).
    Ties on IoU break toward the lower gt index; score ties keep input order.
    """
    return _greedy_match(det_boxes, det_scores, gt_boxes, threshold, benchmark)[0]


def matched_gts(det_boxes: np.ndarray, det_scores: np.ndarray,
                gt_boxes: np.ndarray, threshold: float,
                benchmark: str = "bev") -> np.ndarray:
    """Same greedy matching, but reports which ground truths were claimed."""
    return _greedy_match(det_boxes, det_scores, gt_boxes, threshold, benchmark)[1]


@dataclass
class ClassMetrics:
    ap: float
    ar: float
    n_gt: int
    n_det: int


def _ap_from_points(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-point interpolation: integrate recall steps at running-max precision."""
    if not len(recalls):
        return 0.0
    interp = np.maximum.accumulate(precisions[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recalls, interp):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def ap_ar(detections: dict, ground_truths: dict,
          cfg: EvalConfig | None = None) -> tuple[dict, float]:
    """Per-class AP/AR over a set of frames, plus mAP.

    ``detections`` maps frame id -> (boxes (N,7), labels, scores); ``ground_truths``
    maps frame id -> (boxes (M,7), labels).  Classes come from the config's
    threshold table; classes with no ground truth anywhere are reported with
    n_gt 0 and excluded from mAP.
    """
    cfg = cfg or EvalConfig()
    per_class: dict[str, ClassMetrics] = {}
    aps = []
    for name, threshold in cfg.iou_thresholds.items():
        scores_all: list[float] = []
        tp_all: list[bool] = []
        n_gt = 0
        for fid, (gt_boxes, gt_labels) in ground_truths.items():
            gt_labels = np.asarray(gt_labels)
            gmask = gt_labels == name
            n_gt += int(gmask.sum())
            if fid not in detections:
                continue
            det_boxes, det_labels, det_scores = detections[fid]
            det_labels = np.asarray(det_labels)
            dmask = det_labels == name
            if not dmask.any():
                continue
            tags = match_frame(np.asarray(det_boxes)[dmask],
                               np.asarray(det_scores)[dmask],
                               np.asarray(gt_boxes).reshape(-1, 7)[gmask],
                               threshold, cfg.benchmark)
            scores_all.extend(np.asarray(det_scores)[dmask].tolist())
            tp_all.extend(tags.tolist())
        n_det = len(scores_all)
        if n_gt == 0:
            per_class[name] = ClassMetrics(0.0, 0.0, 0, n_det)
            continue
        if n_det == 0:
            per_class[name] = ClassMetrics(0.0, 0.0, n_gt, 0)
            aps.append(0.0)
            continue
        scores = np.asarray(scores_all)
        tps = np.asarray(tp_all, dtype=np.int64)
        order = np.argsort(-scores, kind="stable")
        scores, tps = scores[order], tps[order]
        cum_tp = np.cumsum(tps)
        cum_fp = np.cumsum(1 - tps)
        # evaluate only at the last index of each distinct score
        boundary = np.nonzero(np.diff(scores, append=-np.inf) != 0.0)[0]
        recalls = cum_tp[boundary] / n_gt
        precisions = cum_tp[boundary] / (cum_tp[boundary] + cum_fp[boundary])
        ap = _ap_from_points(recalls, precisions)
        ar = float(recalls[-1])
        per_class[name] = ClassMetrics(ap, ar, n_gt, n_det)
        aps.append(ap)
    mean_ap = float(np.mean(aps)) if aps else 0.0
    return per_class, mean_ap


def occluded_recall(detections: dict, ground_truths: dict, occluded: dict,
                    cfg: EvalConfig | None = None) -> float:
    """Recall restricted to flagged ground truths (e.g. actors one sensor
    cannot see).  ``occluded`` maps frame id -> bool mask over that frame's
    ground-truth rows; matching uses each class's own IoU threshold.
    """
    cfg = cfg or EvalConfig()
    n_occ = 0
    n_hit = 0
    for fid, (gt_boxes, gt_labels) in ground_truths.items():
        gt_labels = np.asarray(gt_labels)
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
        occ = np.asarray(occluded[fid], dtype=bool)
        for name, threshold in cfg.iou_thresholds.items():
            gmask = gt_labels == name
            occ_c = occ[gmask]
            n_occ += int(occ_c.sum())
            if not occ_c.any() or fid not in detections:
                continue
            det_boxes, det_labels, det_scores = detections[fid]
            dmask = np.asarray(det_labels) == name
            if not dmask.any():
                continue
            hit = matched_gts(np.asarray(det_boxes).reshape(-1, 7)[dmask],
                              np.asarray(det_scores)[dmask],
                              gt_boxes[gmask], threshold, cfg.benchmark)
            n_hit += int((hit & occ_c).sum())
    return n_hit / n_occ if n_occ else 0.0


def format_report(rows: list[dict], class_names: tuple = ("car", "pedestrian")) -> str:
    """Fixed-width text table: method, modality, mAP, per-class AP/AR."""
    header = ["method", "modality", "mAP"]
    for name in class_names:
        header += [f"{name}_AP", f"{name}_AR"]
    lines = ["  ".join(f"{h:>14}" for h in header)]
    for row in rows:
        cells = [f"{row['method']:>14}", f"{row['modality']:>14}",
                 f"{row['map'] * 100:>14.2f}"]
        for name in class_names:
            m = row["classes"][name]
            cells += [f"{m.ap * 100:>14.2f}", f"{m.ar * 100:>14.2f}"]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def format_report_csv(rows: list[dict],
                      class_names: tuple = ("car", "pedestrian")) -> str:
    header = ["method", "modality", "map"]
    for name in class_names:
        header += [f"{name}_ap", f"{name}_ar", f"{name}_n_gt"]
    lines = [",".join(header)]
    for row in rows:
        cells = [str(row["method"]), str(row["modality"]), f"{row['map']:.6f}"]
        for name in class_names:
            m = row["classes"][name]
            cells += [f"{m.ap:.6f}", f"{m.ar:.6f}", str(m.n_gt)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
