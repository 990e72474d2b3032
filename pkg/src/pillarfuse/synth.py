"""Synthetic two-sensor LiDAR scenes with occlusion by construction.

Scenes are boxes over a flat ground plane: labeled actors (cars and
pedestrians) plus unlabeled building occluders.  A scripted crossroads
template places a high roadside sensor and a low onboard sensor so that
some actors are invisible to exactly one of them: a box truck hides a car
ahead of the onboard sensor and shadows another from the roadside pole,
and a corner building blinds the onboard view of the north arm.

Ray casting is a first-hit slab test per box, with class-keyed return
intensity and truncated gaussian range noise (clipped at 3.5 sigma so
every return stays within 4 sigma of a real surface).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio
from .errors import DataError, DegenerateBox
from .geometry import GLOBAL, PointCloud, SensorPose, rotation_matrix, sensor_frame

INTENSITY = {"car": 0.8, "pedestrian": 0.5, "building": 0.3, "ground": 0.2}

GROUND_ID = -1
OCCLUDER_ID = -2

NOISE_CLIP_SIGMA = 3.5


@dataclass(frozen=True)
class LidarModel:
    channels: int = 32
    h_step_deg: float = 0.35
    v_fov_deg: tuple = (-25.0, 5.0)
    max_range: float = 80.0
    dropout: float = 0.0
    sigma: float = 0.01

    def __post_init__(self):
        if self.max_range <= 0:
            raise DataError("max range must be positive")
        if self.sigma < 0 or not 0.0 <= self.dropout < 1.0:
            raise DataError("bad noise or dropout setting")


ONBOARD_LIDAR = LidarModel()
ROADSIDE_LIDAR = LidarModel(v_fov_deg=(-60.0, 5.0))


@dataclass
class SceneBox:
    label: str
    box: np.ndarray  # (x, y, z, w, l, h, yaw)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(7)
        if np.any(self.box[3:6] <= 0):
            raise DegenerateBox(f"{self.label}: non-positive size {self.box[3:6]}")


@dataclass
class Scene:
    actors: list
    occluders: list = field(default_factory=list)
    ground_z: float = 0.0


def ray_directions(model: LidarModel) -> np.ndarray:
    """(channels * n_azimuth, 3) unit rays in the sensor frame."""
    n_h = int(round(360.0 / model.h_step_deg))
    az = np.arange(n_h) * (2.0 * np.pi / n_h)
    el = np.deg2rad(np.linspace(model.v_fov_deg[0], model.v_fov_deg[1],
                                model.channels))
    ce, se = np.cos(el), np.sin(el)
    d = np.empty((model.channels, n_h, 3))
    d[:, :, 0] = ce[:, None] * np.cos(az)[None, :]
    d[:, :, 1] = ce[:, None] * np.sin(az)[None, :]
    d[:, :, 2] = se[:, None]
    return d.reshape(-1, 3)


def _box_hit_ts(origin: np.ndarray, dirs: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Entry distance per ray for one oriented box; inf where missed."""
    cy, sy = np.cos(box[6]), np.sin(box[6])
    rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    half = np.array([box[4], box[3], box[5]]) / 2.0  # local x=length, y=width
    o = rot.T @ (origin - box[:3])
    d = dirs @ rot
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (-half - o) / d
    t2 = (half - o) / d
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    t = np.where((near <= far) & (near > 1e-6), near, np.inf)
    return t


def trace(scene: Scene, pose: SensorPose, model: LidarModel,
          seed, frame_tag: str | None = None) -> tuple[PointCloud, np.ndarray]:
    """Cast the full ray pattern; first hit wins.

    Returns the cloud in the sensor frame plus one hit id per point:
    the actor index, or GROUND_ID / OCCLUDER_ID for unlabeled geometry.
    """
    dirs_s = ray_directions(model)
    rot = rotation_matrix(pose)
    dirs_g = dirs_s @ rot.T
    origin = pose.translation
    boxes = [a.box for a in scene.actors] + [o.box for o in scene.occluders]
    ids = list(range(len(scene.actors))) + [OCCLUDER_ID] * len(scene.occluders)
    ts = np.full((len(boxes) + 1, len(dirs_s)), np.inf)
    for k, box in enumerate(boxes):
        ts[k] = _box_hit_ts(origin, dirs_g, box)
    dz = dirs_g[:, 2]
    height = origin[2] - scene.ground_z
    ts[-1] = np.where((dz < 0) & (height > 0), -height / np.minimum(dz, -1e-12),
                      np.inf)
    ids.append(GROUND_ID)
    best = np.argmin(ts, axis=0)
    t = ts[best, np.arange(len(dirs_s))]
    hit = np.isfinite(t) & (t <= model.max_range)
    t, best, dirs_hit = t[hit], best[hit], dirs_s[hit]
    rng = np.random.default_rng(seed)
    if model.dropout > 0.0:
        keep = rng.random(len(t)) >= model.dropout
        t, best, dirs_hit = t[keep], best[keep], dirs_hit[keep]
    noise = np.clip(rng.normal(0.0, model.sigma, size=len(t)),
                    -NOISE_CLIP_SIGMA * model.sigma, NOISE_CLIP_SIGMA * model.sigma)
    pts = dirs_hit * (t + noise)[:, None]
    id_arr = np.array([ids[b] for b in best], dtype=np.int64)
    labels = [scene.actors[i].label if i >= 0 else
              ("ground" if i == GROUND_ID else "building") for i in id_arr]
    intensity = np.array([INTENSITY[lab] for lab in labels])
    cloud = PointCloud(np.column_stack([pts, intensity]),
                       frame=frame_tag or sensor_frame(0))
    return cloud, id_arr


def raycast(scene: Scene, pose: SensorPose, model: LidarModel,
            seed, frame_tag: str | None = None) -> PointCloud:
    """First-hit LiDAR sweep; see :func:`trace` for per-point hit ids."""
    return trace(scene, pose, model, seed, frame_tag)[0]


# ---------------------------------------------------------------------------
# crossroads template
# ---------------------------------------------------------------------------

ONBOARD_POSE = SensorPose(x=-18.0, y=-2.0, z=1.74, yaw=0.0)
ROADSIDE_POSE = SensorPose(x=5.5, y=5.5, z=3.74, yaw=-2.356)

DESK_ONBOARD_LIDAR = replace(ONBOARD_LIDAR, max_range=40.0)
DESK_ROADSIDE_LIDAR = replace(ROADSIDE_LIDAR, max_range=40.0)

_BUILDING_CORNERS = ((15.0, 15.0), (-15.0, 15.0), (-15.0, -15.0), (15.0, -15.0))


def _car(rng, x, y, yaw):
    w = 1.9 * rng.uniform(0.92, 1.08)
    l = 4.6 * rng.uniform(0.92, 1.08)
    h = 1.7 * rng.uniform(0.95, 1.05)
    return SceneBox("car", [x, y, h / 2.0, w, l, h,
                            yaw + rng.uniform(-0.08, 0.08)])


def _pedestrian(rng, x, y):
    w = rng.uniform(0.36, 0.48)
    h = rng.uniform(1.6, 1.9)
    return SceneBox("pedestrian", [x, y, h / 2.0, w, w, h,
                                   rng.uniform(-np.pi, np.pi)])


def crossroads_scene(rng: np.random.Generator) -> Scene:
    """The occlusion archetype: every frame keeps its engineered blind spots.

    Actor order (fixed): box truck, hidden car (behind the truck, no onboard
    view), north car (behind the NW building, no onboard view), west car,
    south car, shadow car (in the truck's shadow, no roadside view), blind
    pedestrian (behind the NW building), open pedestrian.
    """
    truck_x = rng.uniform(7.0, 8.0)
    truck = SceneBox("car", [truck_x, rng.uniform(-2.2, -1.8), 1.9,
                             2.6, 7.0, 3.8, rng.uniform(-0.05, 0.05)])
    hidden = _car(rng, truck_x + rng.uniform(7.0, 9.0),
                  rng.uniform(-2.2, -1.8), 0.0)
    north = _car(rng, rng.uniform(-2.2, -1.8), rng.uniform(13.0, 18.0),
                 np.pi / 2)
    west = _car(rng, rng.uniform(-14.0, -9.0), rng.uniform(1.8, 2.2), np.pi)
    south = _car(rng, rng.uniform(1.8, 2.2), rng.uniform(-14.0, -11.0),
                 -np.pi / 2)
    shadow = _car(rng, rng.uniform(4.2, 4.8), rng.uniform(-10.0, -8.0),
                  -np.pi / 2)
    ped_blind = _pedestrian(rng, rng.uniform(-4.8, -4.2), rng.uniform(9.0, 10.0))
    ped_open = _pedestrian(rng, rng.uniform(-1.4, -0.6), rng.uniform(-7.5, -6.5))
    occluders = [SceneBox("building", [bx, by, 4.0, 18.0, 18.0, 8.0, 0.0])
                 for bx, by in _BUILDING_CORNERS]
    return Scene(actors=[truck, hidden, north, west, south, shadow,
                         ped_blind, ped_open],
                 occluders=occluders)


def varied_crossroads_scene(rng: np.random.Generator) -> Scene:
    """Crossroads template with randomized actor presence.

    The box truck and the car it hides are always present, so every frame
    keeps at least one onboard-blind actor.  Every other actor appears with
    probability 0.65; a sensor that cannot see a spot therefore cannot
    learn a constant prior for what it contains.
    """
    keep = rng.random(8) < 0.65
    keep[0] = keep[1] = True
    scene = crossroads_scene(rng)
    return Scene(actors=[a for a, k in zip(scene.actors, keep) if k],
                 occluders=scene.occluders)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def split_counts(n_frames: int, ratios: tuple) -> list[int]:
    """Largest-remainder allocation of n_frames over split ratios."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise DataError(f"split ratios must be non-negative and sum to 1: {ratios}")
    raw = [n_frames * r for r in ratios]
    counts = [int(np.floor(v)) for v in raw]
    leftover = n_frames - sum(counts)
    order = np.argsort([c - v for c, v in zip(counts, raw)], kind="stable")
    for k in range(leftover):
        counts[order[k]] += 1
    return counts


def generate_dataset(root, n_frames: int, split_ratios: tuple = (0.8, 0.1, 0.1),
                     master_seed: int = 0,
                     scene_fn=crossroads_scene,
                     onboard_pose: SensorPose = ONBOARD_POSE,
                     roadside_pose: SensorPose = ROADSIDE_POSE,
                     onboard_lidar: LidarModel = DESK_ONBOARD_LIDAR,
                     roadside_lidar: LidarModel = DESK_ROADSIDE_LIDAR) -> dict:
    """Write a full two-sensor dataset; byte-identical per master seed.

    Per frame and split: one binary cloud per sensor (sensor frames), global
    and camera-axis labels, and a per-actor visibility sidecar with return
    counts from each sensor.  Poses are static per split.  Returns the frame
    counts per split.
    """
    root = Path(root)
    counts = split_counts(n_frames, split_ratios)
    poses = {0: dataio.SensorRecord(0, "onboard", onboard_pose),
             1: dataio.SensorRecord(1, "roadside", roadside_pose)}
    manifest: dict[str, list[str]] = {s: [] for s in dataio.SPLITS}
    for si, (split, n_split) in enumerate(zip(dataio.SPLITS, counts)):
        base = root / split
        for sub in (*dataio.VELODYNE_DIRS.values(), "label", "label_kitti",
                    "visibility"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        dataio.write_poses(base / "poses.cfg", poses)
        for fi in range(n_split):
            fid = dataio.frame_id(fi)
            scene = scene_fn(np.random.default_rng([master_seed, si, fi]))
            paths = dataio.frame_paths(root, split, fid)
            vis = np.zeros((len(scene.actors), 3), dtype=np.int64)
            vis[:, 0] = np.arange(len(scene.actors))
            for col, (key, pose, lidar) in enumerate([
                    ("onboard", onboard_pose, onboard_lidar),
                    ("roadside", roadside_pose, roadside_lidar)]):
                cloud, ids = trace(scene, pose, lidar,
                                   [master_seed, si, fi, col],
                                   frame_tag=sensor_frame(col))
                dataio.write_bin(paths[key], cloud)
                for a in range(len(scene.actors)):
                    vis[a, col + 1] = int(np.sum(ids == a))
            records = [dataio.LabelRecord(a.label, h=a.box[5], w=a.box[3],
                                          l=a.box[4], x=a.box[0], y=a.box[1],
                                          z=a.box[2], yaw=a.box[6])
                       for a in scene.actors]
            dataio.write_labels(paths["label"], records)
            boxes = dataio.records_to_array(records)
            kitti = dataio.carla_to_kitti(boxes)
            dataio.write_labels(paths["label_kitti"], [
                dataio.LabelRecord(r.label, h=b[5], w=b[3], l=b[4], x=b[0],
                                   y=b[1], z=b[2], yaw=b[6])
                for r, b in zip(records, kitti)])
            dataio.write_visibility(paths["visibility"], vis)
            manifest[split].append(fid)
    dataio.write_manifest(root, manifest)
    return dict(zip(dataio.SPLITS, counts))
