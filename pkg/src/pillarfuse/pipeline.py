"""End-to-end runs over on-disk datasets: preprocess, train, infer, eval.

A run reads the dataset laid out by the synth generator, turns each
sensor's cloud into pillar tensors on the shared grid (optionally cached
by ``preprocess_dataset``), trains the detector with Adam on the combined
anchor loss, and writes detections, loss logs, and evaluation reports
into the run directory.  Everything is seeded; rerunning a step with the
same config produces byte-identical files.
"""

from __future__ import annotations

import struct
from functools import partial
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import dataio
from .config import RunConfig
from .errors import DataError, DivergenceError, TruncatedFile
from .geometry import geofence, sensor_frame, transform_to_global
from .losses import direction_loss, focal_loss, localization_loss, total_loss
from .metrics import ap_ar, format_report, format_report_csv, occluded_recall
from .model import (
    CLASS_NAMES,
    POSITIVE,
    DetectorNet,
    anchor_grid,
    build_targets,
    decode_frame,
    flatten_head_maps_t,
)
from .nn import tensor as T
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam
from .pillars import D_FEATURES, PillarSet, augment_features, voxelize
from .synth import crossroads_scene, generate_dataset, varied_crossroads_scene

MODE_ROLES = {
    "onboard-only": ("onboard",),
    "roadside-only": ("roadside",),
    "cooperative": ("onboard", "roadside"),
}

CACHE_MAGIC = b"PFPT"
CACHE_VERSION = 1
CACHE_DIR = "pillar_cache"
CHECKPOINT_NAME = "checkpoint.pfck"


def pmap(fn, items, workers: int = 1):
    """Order-preserving map, forked over workers when it pays off."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with get_context("fork").Pool(min(workers, len(items))) as pool:
        return pool.map(fn, items)


# ---------------------------------------------------------------------------
# pillar tensors per frame, with an on-disk cache
# ---------------------------------------------------------------------------

def write_pillar_cache(path, pillars: PillarSet, subsample_seed: int) -> None:
    f = np.ascontiguousarray(pillars.features, dtype="<f4")
    p, n = pillars.P, pillars.N
    head = struct.pack("<4sBHHHIi", CACHE_MAGIC, CACHE_VERSION,
                       pillars.spec.H, pillars.spec.W, n, p, subsample_seed)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(pillars.counts, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(pillars.cell_index, dtype="<u2").tobytes())
        fh.write(f.tobytes())


def read_pillar_cache(path, spec, n_max: int, subsample_seed: int) -> PillarSet:
    raw = Path(path).read_bytes()
    head_size = struct.calcsize("<4sBHHHIi")
    if len(raw) < head_size:
        raise TruncatedFile(f"pillar cache too short: {path}")
    magic, ver, h, w, n, p, seed = struct.unpack_from("<4sBHHHIi", raw)
    if magic != CACHE_MAGIC or ver != CACHE_VERSION:
        raise DataError(f"not a pillar cache: {path}")
    if (h, w, n, seed) != (spec.H, spec.W, n_max, subsample_seed):
        raise DataError(
            f"stale pillar cache {path}: built for grid {h}x{w}, capacity {n}, "
            f"seed {seed}; rerun preprocess")
    want = head_size + p * 2 + p * 4 + D_FEATURES * p * n * 4
    if len(raw) != want:
        raise TruncatedFile(f"pillar cache {path}: {len(raw)} bytes, want {want}")
    off = head_size
    counts = np.frombuffer(raw, "<u2", p, off).astype(np.int64)
    off += p * 2
    cells = np.frombuffer(raw, "<u2", 2 * p, off).astype(np.int64).reshape(p, 2)
    off += p * 4
    feats = np.frombuffer(raw, "<f4", D_FEATURES * p * n, off)
    return PillarSet(feats.reshape(D_FEATURES, p, n).copy(), cells, counts, spec)


def compute_pillars(cfg: RunConfig, split: str, fid: str, role: str,
                    pose) -> PillarSet:
    """Cloud from disk -> global frame -> window -> augmented pillar tensor."""
    sensor_id = 0 if role == "onboard" else 1
    path = Path(cfg.data_root) / split / dataio.VELODYNE_DIRS[role] / f"{fid}.bin"
    cloud = dataio.read_bin(path, frame=sensor_frame(sensor_id))
    fenced = geofence(transform_to_global(cloud, pose), cfg.window())
    ps = voxelize(fenced, cfg.voxel_spec(), cfg.max_points_per_pillar,
                  cfg.max_pillars, seed=cfg.dataset_seed)
    ps = augment_features(ps, ps.spec)
    return PillarSet(ps.features.astype(np.float32), ps.cell_index,
                     ps.counts, ps.spec)


def load_pillars(cfg: RunConfig, split: str, fid: str, role: str,
                 pose) -> PillarSet:
    cache = Path(cfg.data_root) / split / CACHE_DIR / f"{fid}_{role}.pfp"
    if cache.exists():
        return read_pillar_cache(cache, cfg.voxel_spec(),
                                 cfg.max_points_per_pillar, cfg.dataset_seed)
    return compute_pillars(cfg, split, fid, role, pose)


def _roles_and_poses(cfg: RunConfig, split: str) -> list[tuple[str, object]]:
    pose_path = Path(cfg.data_root) / split / "poses.cfg"
    if not pose_path.exists():
        raise DataError(f"missing sensor poses: {pose_path}")
    by_role = {rec.role: rec.pose for rec in dataio.read_poses(pose_path).values()}
    out = []
    for role in MODE_ROLES[cfg.fusion_mode]:
        if role not in by_role:
            raise DataError(f"dataset has no {role!r} sensor in {pose_path}")
        out.append((role, by_role[role]))
    return out


def _cache_one(item, cfg: RunConfig) -> str:
    split, fid, role, pose = item
    out = Path(cfg.data_root) / split / CACHE_DIR / f"{fid}_{role}.pfp"
    write_pillar_cache(out, compute_pillars(cfg, split, fid, role, pose),
                       cfg.dataset_seed)
    return str(out)


def preprocess_dataset(cfg: RunConfig) -> int:
    """Cache pillar tensors for every frame and sensor; returns the count."""
    root = Path(cfg.data_root)
    manifest = dataio.read_manifest(root)
    jobs = []
    for split, fids in manifest.items():
        if not fids:
            continue
        pose_path = root / split / "poses.cfg"
        by_role = {rec.role: rec.pose
                   for rec in dataio.read_poses(pose_path).values()}
        (root / split / CACHE_DIR).mkdir(parents=True, exist_ok=True)
        for fid in fids:
            for role in ("onboard", "roadside"):
                jobs.append((split, fid, role, by_role[role]))
    pmap(partial(_cache_one, cfg=cfg), jobs, cfg.workers)
    return len(jobs)


# ---------------------------------------------------------------------------
# frames for training and inference
# ---------------------------------------------------------------------------

def _gt_from_records(records) -> tuple[np.ndarray, np.ndarray, list[str]]:
    boxes = dataio.records_to_array(records)
    names = [r.label for r in records]
    unknown = sorted(set(names) - set(CLASS_NAMES))
    if unknown:
        raise DataError(f"labels outside the class table: {unknown}")
    classes = np.array([CLASS_NAMES.index(n) for n in names], dtype=np.int64)
    return boxes, classes, names


def load_split(cfg: RunConfig, split: str, with_targets: bool = False) -> list[dict]:
    """Frames of one split as pillar tensors plus ground truth.

    Each frame dict carries ``fid``, per-role ``pillars`` (fusion-mode
    order), ``gt_boxes``/``gt_classes``/``gt_names``, per-role ``occluded``
    masks from the visibility sidecar, and, when requested, anchor
    ``targets`` (states, deltas, direction bins, labels).
    """
    manifest = dataio.read_manifest(Path(cfg.data_root))
    if split not in manifest:
        raise DataError(f"unknown split {split!r}")
    roles = _roles_and_poses(cfg, split)
    spec = cfg.voxel_spec()
    a_boxes, a_classes = anchor_grid(spec)
    frames = []
    for fid in manifest[split]:
        paths = dataio.frame_paths(Path(cfg.data_root), split, fid)
        records = dataio.read_labels(paths["label"])
        gt_boxes, gt_classes, gt_names = _gt_from_records(records)
        vis = dataio.read_visibility(paths["visibility"])
        if len(vis) != len(records):
            raise DataError(f"visibility rows disagree with labels for {fid}")
        frame = {
            "fid": fid,
            "pillars": [load_pillars(cfg, split, fid, role, pose)
                        for role, pose in roles],
            "gt_boxes": gt_boxes,
            "gt_classes": gt_classes,
            "gt_names": gt_names,
            "occluded": {"onboard": vis[:, 1] == 0, "roadside": vis[:, 2] == 0},
        }
        if with_targets:
            frame["targets"] = build_targets(a_boxes, a_classes,
                                             gt_boxes, gt_classes)
        frames.append(frame)
    return frames


def build_net(cfg: RunConfig, rng: np.random.Generator) -> DetectorNet:
    return DetectorNet(rng, cfg.voxel_spec(),
                       pillar_channels=cfg.pillar_channels,
                       backbone=cfg.backbone_spec())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def batch_loss(net: DetectorNet, batch: list[dict], weights):
    """One forward pass; anchor rows of the whole batch share one loss.

    Sums are normalized by the batch's positive-anchor count, so the
    gradient scale does not depend on how many frames share a step.
    """
    cls_map, box_map, dir_map = net.forward([f["pillars"] for f in batch])
    k = len(CLASS_NAMES)
    logits = flatten_head_maps_t(cls_map, k)
    deltas = flatten_head_maps_t(box_map, 7)
    dir_logits = flatten_head_maps_t(dir_map, 2)
    states = np.concatenate([f["targets"][0] for f in batch])
    loc_t = np.concatenate([f["targets"][1] for f in batch])
    dir_t = np.concatenate([f["targets"][2] for f in batch])
    labels = np.concatenate([f["targets"][3] for f in batch])
    pos = states == POSITIVE
    n_pos = int(pos.sum())
    loc = localization_loss(deltas, loc_t, pos, weights.beta_s)
    cls = focal_loss(logits, labels, states, weights.alpha, weights.gamma)
    dirn = direction_loss(dir_logits, dir_t, pos)
    parts = (float(loc.data), float(cls.data), float(dirn.data), n_pos)
    return total_loss(loc, cls, dirn, n_pos, weights), parts


def fit_net(net: DetectorNet, frames: list[dict], cfg: RunConfig,
            rng: np.random.Generator, on_epoch=None) -> list[tuple]:
    """Adam over shuffled batches; returns per-step loss rows.

    Row layout: (epoch, step, loss, loc_term, cls_term, dir_term, n_pos),
    the three terms weighted and normalized so they sum to the loss.
    """
    if not frames:
        raise DataError("no training frames")
    for f in frames:
        if "targets" not in f:
            raise DataError("training frames need precomputed targets")
    weights = cfg.loss_weights()
    opt = Adam(net.parameters(), lr=cfg.learning_rate,
               weight_decay=cfg.weight_decay)
    rows = []
    net.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for step, start in enumerate(range(0, len(frames), cfg.batch_size)):
            batch = [frames[int(i)] for i in order[start:start + cfg.batch_size]]
            loss, (l_s, c_s, d_s, n_pos) = batch_loss(net, batch, weights)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            denom = float(max(n_pos, 1))
            rows.append((epoch, step, float(loss.data),
                         weights.beta_loc * l_s / denom,
                         weights.beta_cls * c_s / denom,
                         weights.beta_dir * d_s / denom, n_pos))
        if on_epoch is not None:
            on_epoch(epoch, net)
    return rows


def write_loss_log(path, rows) -> None:
    lines = ["epoch,step,loss,loc,cls,dir,n_pos"]
    for e, s, t, l, c, d, n in rows:
        lines.append(f"{e},{s},{t:.9g},{l:.9g},{c:.9g},{d:.9g},{n}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train_run(cfg: RunConfig) -> Path:
    """Train per the config; writes loss_log.csv and checkpoint.pfck."""
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    T.set_default_dtype(np.float32)
    frames = load_split(cfg, "train", with_targets=True)
    rng = np.random.default_rng(cfg.seed)
    net = build_net(cfg, rng)
    ckpt = run / CHECKPOINT_NAME

    def on_epoch(_epoch, model):
        save_checkpoint(ckpt, model.state_dict())

    rows = fit_net(net, frames, cfg, rng, on_epoch=on_epoch)
    write_loss_log(run / "loss_log.csv", rows)
    return ckpt


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def run_inference(net: DetectorNet, frames: list[dict],
                  cfg: RunConfig) -> dict:
    """Detections per frame id: (boxes (M,7), names, scores)."""
    net.eval()
    out = {}
    for start in range(0, len(frames), cfg.batch_size):
        chunk = frames[start:start + cfg.batch_size]
        with T.no_grad():
            cls_map, box_map, dir_map = net.forward(
                [f["pillars"] for f in chunk])
        for b, frame in enumerate(chunk):
            boxes, cls_idx, scores = decode_frame(
                cls_map.data[b], box_map.data[b], dir_map.data[b],
                net.anchor_boxes, net.anchor_classes,
                cfg.score_threshold, cfg.nms_iou, cfg.max_detections)
            names = [CLASS_NAMES[c] for c in cls_idx]
            out[frame["fid"]] = (boxes, names, scores)
    return out


def write_detections(out_dir, detections: dict) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fid in sorted(detections):
        boxes, names, scores = detections[fid]
        records = [dataio.LabelRecord(n, h=b[5], w=b[3], l=b[4], x=b[0],
                                      y=b[1], z=b[2], yaw=b[6], score=float(s))
                   for b, n, s in zip(boxes, names, scores)]
        path = out_dir / f"{fid}.txt"
        dataio.write_labels(path, records)
        written.append(path)
    return written


def infer_run(cfg: RunConfig, split: str = "test",
              checkpoint=None) -> dict:
    """Load the checkpoint, detect over a split, write label files."""
    run = Path(cfg.run_dir)
    ckpt = Path(checkpoint) if checkpoint is not None else run / CHECKPOINT_NAME
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt} (train first)")
    T.set_default_dtype(np.float32)
    net = build_net(cfg, np.random.default_rng(cfg.seed))
    net.load_state_dict(load_checkpoint(ckpt))
    frames = load_split(cfg, split)
    detections = run_inference(net, frames, cfg)
    write_detections(run / "detections" / split, detections)
    return detections


def load_ground_truth(cfg: RunConfig, split: str) -> dict:
    gts = {}
    for fid in dataio.read_manifest(Path(cfg.data_root)).get(split, []):
        paths = dataio.frame_paths(Path(cfg.data_root), split, fid)
        boxes, _, names = _gt_from_records(dataio.read_labels(paths["label"]))
        gts[fid] = (boxes, np.array(names))
    if not gts:
        raise DataError(f"no ground truth frames in split {split!r}")
    return gts


def load_detections(det_dir, fids) -> dict:
    """Detection label files (with scores) back into eval form."""
    det_dir = Path(det_dir)
    out = {}
    for fid in fids:
        path = det_dir / f"{fid}.txt"
        if not path.exists():
            continue
        records = dataio.read_labels(path)
        if any(r.score is None for r in records):
            raise DataError(f"detections without scores: {path}")
        boxes = dataio.records_to_array(records)
        out[fid] = (boxes, np.array([r.label for r in records]),
                    np.array([r.score for r in records]))
    return out


def eval_run(cfg: RunConfig, split: str = "test", detections: dict | None = None,
             detections_dir=None) -> list[dict]:
    """AP/AR report over BEV and 3D benchmarks; writes report.txt/.csv."""
    run = Path(cfg.run_dir)
    gts = load_ground_truth(cfg, split)
    if detections is None:
        det_dir = detections_dir or run / "detections" / split
        detections = load_detections(det_dir, sorted(gts))
    rows = []
    for benchmark in ("bev", "3d"):
        per_class, mean_ap = ap_ar(detections, gts, cfg.eval_config(benchmark))
        rows.append({"method": cfg.fusion_mode, "modality": benchmark,
                     "map": mean_ap, "classes": per_class})
    run.mkdir(parents=True, exist_ok=True)
    (run / "report.txt").write_text(format_report(rows), encoding="utf-8")
    (run / "report.csv").write_text(format_report_csv(rows), encoding="utf-8")
    return rows


def split_occlusion_masks(frames: list[dict], role: str) -> dict:
    """Per-frame masks of actors invisible to one sensor."""
    return {f["fid"]: f["occluded"][role] for f in frames}


def blind_spot_recall(cfg: RunConfig, detections: dict, frames: list[dict],
                      blind_role: str, benchmark: str = "bev") -> float:
    """Recall over actors the given sensor cannot see at all."""
    gts = {f["fid"]: (f["gt_boxes"], np.array(f["gt_names"])) for f in frames}
    occ = split_occlusion_masks(frames, blind_role)
    return occluded_recall(detections, gts, occ, cfg.eval_config(benchmark))


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def synth_run(cfg: RunConfig) -> dict:
    scene_fn = (crossroads_scene if cfg.scene == "crossroads"
                else varied_crossroads_scene)
    return generate_dataset(cfg.data_root, cfg.n_frames, cfg.split_ratios,
                            cfg.dataset_seed, scene_fn=scene_fn)
