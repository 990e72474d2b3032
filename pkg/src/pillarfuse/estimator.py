"""Scikit-learn style facade over the fusion detector.

``FusedPillarDetector`` trains and predicts on in-memory point clouds, so
the detector can sit inside sklearn tooling (``clone``, ``get_params``,
grid search) without touching the on-disk dataset layout.  Clouds are
expected in the shared world frame; each frame is a mapping from sensor
role to an (N, 4) array of x, y, z, intensity.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, validate_config
from .geometry import GLOBAL, PointCloud, geofence
from .metrics import ap_ar
from .model import CLASS_NAMES, DetectorNet, anchor_grid, build_targets
from .nn import tensor as T
from .pillars import PillarSet, augment_features, voxelize
from .pipeline import MODE_ROLES, fit_net, run_inference

_DEF = RunConfig()

# constructor keywords, all mirroring run-config fields of the same name
_PARAM_FIELDS = (
    "fusion_mode", "x_min", "x_max", "y_min", "y_max", "z_min", "z_max",
    "voxel_x", "voxel_y", "max_points_per_pillar", "max_pillars",
    "pillar_channels", "backbone_layers", "backbone_channels",
    "upsample_channels", "score_threshold", "nms_iou", "max_detections",
    "loc_weight", "cls_weight", "dir_weight", "focal_alpha", "focal_gamma",
    "smooth_l1_beta", "epochs", "batch_size", "learning_rate",
    "weight_decay", "seed", "iou_car", "iou_pedestrian",
)


def check_point_cloud_frames(X, roles) -> list[dict]:
    """Validate a sequence of {role: (N, 4) array} frames; returns clean copies.

    Raises:
        ValueError: on non-mapping frames, missing roles, bad shapes, or
            non-finite coordinates.
    """
    frames = []
    for i, frame in enumerate(X):
        if not hasattr(frame, "keys"):
            raise ValueError(f"frame {i} is not a mapping of sensor roles")
        clean = {}
        for role in roles:
            if role not in frame:
                raise ValueError(f"frame {i} is missing the {role!r} cloud")
            arr = np.asarray(frame[role], dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 4:
                raise ValueError(
                    f"frame {i} {role!r} cloud must be (N, 4), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"frame {i} {role!r} cloud has non-finite values")
            clean[role] = arr
        frames.append(clean)
    return frames


def check_box_targets(y, n_frames: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validate ground truth as {"boxes": (M, 7), "labels": [str]} per frame.

    Raises:
        ValueError: on length mismatch, bad box shapes, non-finite values,
            or labels outside the class table.
    """
    if len(y) != n_frames:
        raise ValueError(f"y has {len(y)} frames, X has {n_frames}")
    out = []
    for i, item in enumerate(y):
        boxes = np.asarray(item["boxes"], dtype=np.float64).reshape(-1, 7)
        labels = list(item["labels"])
        if len(labels) != len(boxes):
            raise ValueError(
                f"frame {i}: {len(boxes)} boxes but {len(labels)} labels")
        if not np.all(np.isfinite(boxes)):
            raise ValueError(f"frame {i}: non-finite ground-truth boxes")
        unknown = sorted(set(labels) - set(CLASS_NAMES))
        if unknown:
            raise ValueError(f"frame {i}: labels outside the class table: "
                             f"{unknown}")
        classes = np.array([CLASS_NAMES.index(n) for n in labels],
                           dtype=np.int64)
        out.append((boxes, classes))
    return out


class FusedPillarDetector(BaseEstimator):
    """Multi-sensor pillar detector with the sklearn estimator protocol.

    Parameters mirror the run-config fields of the same names; defaults come
    from :class:`~pillarfuse.config.RunConfig`.  ``fit`` expects X as a
    sequence of {role: (N, 4) cloud} mappings in the world frame and y as a
    sequence of {"boxes": (M, 7), "labels": [str]} mappings.
    """

    def __init__(self, *,
                 fusion_mode=_DEF.fusion_mode,
                 x_min=_DEF.x_min, x_max=_DEF.x_max,
                 y_min=_DEF.y_min, y_max=_DEF.y_max,
                 z_min=_DEF.z_min, z_max=_DEF.z_max,
                 voxel_x=_DEF.voxel_x, voxel_y=_DEF.voxel_y,
                 max_points_per_pillar=_DEF.max_points_per_pillar,
                 max_pillars=_DEF.max_pillars,
                 pillar_channels=_DEF.pillar_channels,
                 backbone_layers=_DEF.backbone_layers,
                 backbone_channels=_DEF.backbone_channels,
                 upsample_channels=_DEF.upsample_channels,
                 score_threshold=_DEF.score_threshold,
                 nms_iou=_DEF.nms_iou,
                 max_detections=_DEF.max_detections,
                 loc_weight=_DEF.loc_weight, cls_weight=_DEF.cls_weight,
                 dir_weight=_DEF.dir_weight, focal_alpha=_DEF.focal_alpha,
                 focal_gamma=_DEF.focal_gamma,
                 smooth_l1_beta=_DEF.smooth_l1_beta,
                 epochs=_DEF.epochs, batch_size=_DEF.batch_size,
                 learning_rate=_DEF.learning_rate,
                 weight_decay=_DEF.weight_decay, seed=_DEF.seed,
                 iou_car=_DEF.iou_car, iou_pedestrian=_DEF.iou_pedestrian):
        self.fusion_mode = fusion_mode
        self.x_min = x_min
        self.x_max = x_max
        self.y_min = y_min
        self.y_max = y_max
        self.z_min = z_min
        self.z_max = z_max
        self.voxel_x = voxel_x
        self.voxel_y = voxel_y
        self.max_points_per_pillar = max_points_per_pillar
        self.max_pillars = max_pillars
        self.pillar_channels = pillar_channels
        self.backbone_layers = backbone_layers
        self.backbone_channels = backbone_channels
        self.upsample_channels = upsample_channels
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.max_detections = max_detections
        self.loc_weight = loc_weight
        self.cls_weight = cls_weight
        self.dir_weight = dir_weight
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.smooth_l1_beta = smooth_l1_beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.seed = seed
        self.iou_car = iou_car
        self.iou_pedestrian = iou_pedestrian

    def fit(self, X, y):
        cfg = self._config()
        frames = self._pillar_frames(X, cfg)
        if not frames:
            raise ValueError("X has no frames")
        truths = check_box_targets(y, len(frames))
        a_boxes, a_classes = anchor_grid(cfg.voxel_spec())
        for frame, (boxes, classes) in zip(frames, truths):
            frame["targets"] = build_targets(a_boxes, a_classes, boxes, classes)
        T.set_default_dtype(np.float32)
        rng = np.random.default_rng(cfg.seed)
        net = DetectorNet(rng, cfg.voxel_spec(),
                          pillar_channels=cfg.pillar_channels,
                          backbone=cfg.backbone_spec())
        self.loss_curve_ = [row[2] for row in fit_net(net, frames, cfg, rng)]
        self.net_ = net
        self.classes_ = list(CLASS_NAMES)
        return self

    def predict(self, X) -> list[dict]:
        """Detections per frame: {"boxes" (M, 7), "labels" [str], "scores" (M,)}."""
        check_is_fitted(self, "net_")
        cfg = self._config()
        frames = self._pillar_frames(X, cfg)
        dets = run_inference(self.net_, frames, cfg)
        out = []
        for frame in frames:
            boxes, names, scores = dets[frame["fid"]]
            out.append({"boxes": boxes, "labels": names, "scores": scores})
        return out

    def score(self, X, y) -> float:
        """Mean average precision over classes on the planar benchmark."""
        truths = check_box_targets(y, len(X))
        preds = self.predict(X)
        det_map, gt_map = {}, {}
        for i, (pred, (boxes, classes)) in enumerate(zip(preds, truths)):
            fid = f"{i:06d}"
            det_map[fid] = (pred["boxes"], pred["labels"], pred["scores"])
            gt_map[fid] = (boxes, np.array([CLASS_NAMES[c] for c in classes]))
        cfg = self._config()
        _, mean_ap = ap_ar(det_map, gt_map, cfg.eval_config("bev"))
        return mean_ap

    # ------------------------------------------------------------------
    # internals
    # ------------------------------------------------------------------

    def _config(self) -> RunConfig:
        cfg = dataclasses.replace(RunConfig(), **{
            name: getattr(self, name) for name in _PARAM_FIELDS})
        validate_config(cfg)
        return cfg

    def _pillar_frames(self, X, cfg: RunConfig) -> list[dict]:
        roles = MODE_ROLES[cfg.fusion_mode]
        spec = cfg.voxel_spec()
        frames = []
        for i, clean in enumerate(check_point_cloud_frames(X, roles)):
            pillars = []
            for role in roles:
                cloud = geofence(PointCloud(clean[role], frame=GLOBAL),
                                 cfg.window())
                ps = voxelize(cloud, spec, cfg.max_points_per_pillar,
                              cfg.max_pillars, seed=cfg.dataset_seed)
                ps = augment_features(ps, spec)
                pillars.append(PillarSet(ps.features.astype(np.float32),
                                         ps.cell_index, ps.counts, spec))
            frames.append({"fid": f"{i:06d}", "pillars": pillars})
        return frames
