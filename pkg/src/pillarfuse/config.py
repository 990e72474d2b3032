"""Run configuration: one flat YAML mapping, validated before any work.

A config names the dataset and run locations, the detection window and
voxel grid, model widths, loss weights, the training schedule, and eval
thresholds.  Unknown keys are rejected so typos fail loudly, and every
key has a one-line description used by the command-line help.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import yaml

from .errors import ConfigError, ShapeMismatch
from .geometry import GeoFence
from .losses import LossWeights
from .metrics import EvalConfig
from .model import BackboneSpec
from .pillars import VoxelSpec

FUSION_MODES = ("onboard-only", "roadside-only", "cooperative")
SCENE_TEMPLATES = ("crossroads", "crossroads-varied")
WORKERS_ENV = "PILLARFUSE_WORKERS"


@dataclass
class RunConfig:
    # paths
    data_root: str = "data/crossroads"
    run_dir: str = "runs/cooperative"
    # dataset synthesis
    n_frames: int = 200
    split_ratios: tuple = (0.8, 0.1, 0.1)
    scene: str = "crossroads-varied"
    dataset_seed: int = 0
    # detection window and voxel grid
    x_min: float = -25.6
    x_max: float = 25.6
    y_min: float = -25.6
    y_max: float = 25.6
    z_min: float = -1.26
    z_max: float = 3.74
    voxel_x: float = 0.8
    voxel_y: float = 0.8
    max_points_per_pillar: int = 32
    max_pillars: int = 12000
    # model
    pillar_channels: int = 32
    backbone_layers: tuple = (2, 3, 3)
    backbone_channels: tuple = (16, 32, 64)
    upsample_channels: int = 32
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    max_detections: int = 100
    # loss
    loc_weight: float = 2.0
    cls_weight: float = 1.0
    dir_weight: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    # training
    fusion_mode: str = "cooperative"
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    # eval
    iou_car: float = 0.50
    iou_pedestrian: float = 0.25
    # rendering
    render_pixel_size: float = 0.1
    # execution
    workers: int = 1

    def window(self) -> GeoFence:
        return GeoFence((self.x_min, self.x_max), (self.y_min, self.y_max),
                        (self.z_min, self.z_max))

    def voxel_spec(self) -> VoxelSpec:
        return VoxelSpec(self.voxel_x, self.voxel_y,
                         self.z_max - self.z_min, self.window())

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.pillar_channels, tuple(self.backbone_layers),
                            tuple(self.backbone_channels),
                            self.upsample_channels)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loc_weight, self.cls_weight, self.dir_weight,
                           self.focal_alpha, self.focal_gamma,
                           self.smooth_l1_beta)

    def eval_config(self, benchmark: str = "bev") -> EvalConfig:
        return EvalConfig({"car": self.iou_car,
                           "pedestrian": self.iou_pedestrian}, benchmark)


FIELD_DOCS = {
    "data_root": "dataset directory (synth writes here, the rest read)",
    "run_dir": "output directory for checkpoints, logs, and reports",
    "n_frames": "number of frames the synth command generates",
    "split_ratios": "train/val/test fractions, must sum to 1",
    "scene": f"scene template, one of {SCENE_TEMPLATES}",
    "dataset_seed": "master seed for dataset generation",
    "x_min": "detection window lower x bound (m)",
    "x_max": "detection window upper x bound (m)",
    "y_min": "detection window lower y bound (m)",
    "y_max": "detection window upper y bound (m)",
    "z_min": "detection window lower z bound (m)",
    "z_max": "detection window upper z bound (m)",
    "voxel_x": "pillar cell size along x (m)",
    "voxel_y": "pillar cell size along y (m)",
    "max_points_per_pillar": "point capacity per pillar before subsampling",
    "max_pillars": "pillar capacity per cloud before dropping sparse cells",
    "pillar_channels": "encoded feature channels per pillar",
    "backbone_layers": "conv layers per backbone block",
    "backbone_channels": "conv channels per backbone block",
    "upsample_channels": "channels each upsampled stream contributes",
    "score_threshold": "minimum detection score kept at decode time",
    "nms_iou": "IoU above which a lower-scored overlapping box is dropped",
    "max_detections": "detection cap per frame after NMS",
    "loc_weight": "weight of the localization loss term",
    "cls_weight": "weight of the classification loss term",
    "dir_weight": "weight of the direction loss term",
    "focal_alpha": "focal loss alpha (class balance)",
    "focal_gamma": "focal loss gamma (easy-example down-weighting)",
    "smooth_l1_beta": "smooth-L1 quadratic/linear crossover",
    "fusion_mode": f"sensor selection, one of {FUSION_MODES}",
    "epochs": "training epochs",
    "batch_size": "frames per optimizer step",
    "learning_rate": "Adam learning rate",
    "weight_decay": "Adam weight decay",
    "seed": "seed for weight init, shuffling, and subsampling",
    "iou_car": "IoU threshold for a car match",
    "iou_pedestrian": "IoU threshold for a pedestrian match",
    "render_pixel_size": "meters per pixel in rendered birds-eye images",
    "workers": f"parallel worker processes (env {WORKERS_ENV} overrides)",
}


def _coerce(name: str, value, default):
    """Cast a raw YAML or command-line value to the field's declared type."""
    try:
        if isinstance(default, bool):
            raise ConfigError(f"{name}: bool fields are not used")
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            if not isinstance(value, (list, tuple)):
                raise ValueError("expected a sequence")
            kind = type(default[0])
            return tuple(kind(v) for v in value)
        if isinstance(default, int) and not isinstance(value, bool):
            out = int(str(value), 0) if isinstance(value, str) else int(value)
            if float(out) != float(value if not isinstance(value, str) else out):
                raise ValueError("not an integer")
            return out
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name!r}: {value!r} ({exc})") from None
    raise ConfigError(f"unsupported field type for {name!r}")


def load_config(path=None, overrides: dict | None = None,
                env: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file, then env worker count, then overrides."""
    defaults = RunConfig()
    values = asdict(defaults)
    known = {f.name for f in fields(RunConfig)}
    if path is not None:
        try:
            raw = yaml.safe_load(open(path, "r", encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in raw.items():
            values[k] = _coerce(k, v, getattr(defaults, k))
    if env is not None and env.get(WORKERS_ENV):
        values["workers"] = _coerce("workers", env[WORKERS_ENV], defaults.workers)
    for k, v in (overrides or {}).items():
        if k not in known:
            raise ConfigError(f"unknown config key: {k}")
        values[k] = _coerce(k, v, getattr(defaults, k))
    return RunConfig(**values)


def validate_config(cfg: RunConfig) -> RunConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.fusion_mode in FUSION_MODES,
         f"fusion_mode must be one of {FUSION_MODES}, got {cfg.fusion_mode!r}")
    need(cfg.scene in SCENE_TEMPLATES,
         f"scene must be one of {SCENE_TEMPLATES}, got {cfg.scene!r}")
    need(cfg.n_frames >= 1, "n_frames must be at least 1")
    need(len(cfg.split_ratios) == 3, "split_ratios needs train/val/test entries")
    need(abs(sum(cfg.split_ratios) - 1.0) < 1e-9 and
         all(r >= 0 for r in cfg.split_ratios),
         f"split_ratios must be non-negative and sum to 1: {cfg.split_ratios}")
    need(cfg.x_max > cfg.x_min and cfg.y_max > cfg.y_min and
         cfg.z_max > cfg.z_min, "window bounds must be increasing")
    need(cfg.voxel_x > 0 and cfg.voxel_y > 0, "voxel edges must be positive")
    need(cfg.max_points_per_pillar >= 1 and cfg.max_pillars >= 1,
         "pillar capacities must be at least 1")
    need(cfg.pillar_channels >= 1, "pillar_channels must be at least 1")
    need(len(cfg.backbone_layers) == len(cfg.backbone_channels) >= 1,
         "backbone_layers and backbone_channels must pair up")
    need(all(n >= 1 for n in cfg.backbone_layers) and
         all(c >= 1 for c in cfg.backbone_channels) and
         cfg.upsample_channels >= 1, "backbone sizes must be positive")
    need(0.0 <= cfg.score_threshold < 1.0, "score_threshold must be in [0, 1)")
    need(0.0 < cfg.nms_iou <= 1.0, "nms_iou must be in (0, 1]")
    need(cfg.max_detections >= 1, "max_detections must be at least 1")
    need(0.0 < cfg.iou_car <= 1.0 and 0.0 < cfg.iou_pedestrian <= 1.0,
         "eval IoU thresholds must be in (0, 1]")
    need(cfg.epochs >= 1 and cfg.batch_size >= 1, "schedule must be positive")
    need(cfg.learning_rate > 0, "learning_rate must be positive")
    need(cfg.weight_decay >= 0, "weight_decay must be non-negative")
    need(cfg.render_pixel_size > 0, "render_pixel_size must be positive")
    need(cfg.workers >= 1, "workers must be at least 1")
    need(cfg.focal_gamma >= 0 and 0 < cfg.focal_alpha < 1 and
         cfg.smooth_l1_beta > 0, "loss shape parameters out of range")
    need(cfg.loc_weight > 0 and cfg.cls_weight > 0 and cfg.dir_weight > 0,
         "loss weights must be positive")
    try:
        spec = cfg.voxel_spec()
    except ShapeMismatch as exc:
        raise ConfigError(str(exc)) from None
    div = 2 ** len(cfg.backbone_layers)
    need(spec.H % div == 0 and spec.W % div == 0,
         f"grid {spec.H}x{spec.W} must be divisible by {div} for the backbone")
    return cfg


def resolve_config(path=None, overrides: dict | None = None,
                   env: dict | None = None) -> RunConfig:
    return validate_config(load_config(path, overrides, env))


def save_config(cfg: RunConfig, path) -> None:
    """Frozen, key-sorted copy of a resolved config (lists for tuples)."""
    data = {k: list(v) if isinstance(v, tuple) else v
            for k, v in asdict(cfg).items()}
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=True, default_flow_style=False)
