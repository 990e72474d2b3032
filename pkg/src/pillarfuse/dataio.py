"""On-disk formats: point-cloud binaries, label text files, pose files, manifests.

Boxes travel as (N, 7) float64 arrays ordered (x, y, z, w, l, h, yaw) with
center-z convention in every frame; label files carry the fields in KITTI-like
order (class, h, w, l, x, y, z, yaw, optional score).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, TruncatedFile
from .geometry import GLOBAL, KITTI, PointCloud, SensorPose, wrap_angle

ROLES = ("onboard", "roadside")

# global (z-up, forward-x) axes expressed in camera (right-x, down-y, forward-z)
# axes: x_cam = y_g, y_cam = -z_g, z_cam = x_g
_G2K = np.array([[0.0, 1.0, 0.0],
                 [0.0, 0.0, -1.0],
                 [1.0, 0.0, 0.0]])

LABEL_HEADER = "# class h w l x y z yaw [score]"


# ---------------------------------------------------------------------------
# point-cloud binaries
# ---------------------------------------------------------------------------

def read_bin(path, frame: str) -> PointCloud:
    """Read little-endian float32 (x, y, z, i) records and tag them ``frame``."""
    buf = Path(path).read_bytes()
    if len(buf) % 16:
        raise TruncatedFile(f"{path}: {len(buf)} bytes is not a whole number of points")
    pts = np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(pts, frame)


def write_bin(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(
        np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# label files
# ---------------------------------------------------------------------------

@dataclass
class LabelRecord:
    """One object row: class name, 7-DoF box, optional detection score."""

    label: str
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    yaw: float
    score: float | None = None

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.yaw])


def records_to_array(records: list[LabelRecord]) -> np.ndarray:
    """Stack records into an (N, 7) box array (empty records give (0, 7))."""
    if not records:
        return np.zeros((0, 7))
    return np.stack([r.box for r in records])


def array_to_records(boxes: np.ndarray, labels: list[str],
                     scores=None) -> list[LabelRecord]:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = []
    for i, (b, name) in enumerate(zip(boxes, labels)):
        s = None if scores is None else float(scores[i])
        out.append(LabelRecord(name, float(b[5]), float(b[3]), float(b[4]),
                               float(b[0]), float(b[1]), float(b[2]),
                               float(b[6]), s))
    return out


def read_labels(path) -> list[LabelRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (8, 9):
                raise ParseError(f"expected 8 or 9 fields, got {len(parts)}", lineno)
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError as e:
                raise ParseError(str(e), lineno) from None
            score = vals[7] if len(vals) == 8 else None
            records.append(LabelRecord(parts[0], *vals[:7], score=score))
    return records


def write_labels(path, records: list[LabelRecord]) -> None:
    lines = [LABEL_HEADER]
    for r in records:
        fields = [r.label] + [f"{v:.17g}" for v in (r.h, r.w, r.l, r.x, r.y, r.z, r.yaw)]
        if r.score is not None:
            fields.append(f"{r.score:.17g}")
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# global <-> camera-axis box conversion
# ---------------------------------------------------------------------------

def carla_to_kitti(boxes: np.ndarray) -> np.ndarray:
    """Map (N, 7) global-frame boxes into camera axes (right-x, down-y, forward-z).

    Centers go through the axis permutation, sizes are untouched (they ride the
    object's own axes), and yaw around global up becomes rotation around the
    camera's down axis, shifted so a forward-facing object reads ry = -pi/2.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = boxes.copy()
    out[:, :3] = boxes[:, :3] @ _G2K.T
    out[:, 6] = wrap_angle(boxes[:, 6] - math.pi / 2)
    return out


def kitti_to_carla(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = boxes.copy()
    out[:, :3] = boxes[:, :3] @ _G2K
    out[:, 6] = wrap_angle(boxes[:, 6] + math.pi / 2)
    return out


# ---------------------------------------------------------------------------
# pose files
# ---------------------------------------------------------------------------

@dataclass
class SensorRecord:
    sensor_id: int
    role: str
    pose: SensorPose


def read_poses(path) -> dict[int, SensorRecord]:
    """Parse an INI pose file: one [sensor.<id>] section per sensor, degrees."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        lineno = getattr(e, "lineno", 0) or 0
        raise ParseError(f"pose file: {e.message if hasattr(e, 'message') else e}",
                         lineno) from None
    records: dict[int, SensorRecord] = {}
    for section in parser.sections():
        if not section.startswith("sensor."):
            raise ParseError(f"unexpected section [{section}]", 0)
        try:
            sensor_id = int(section.split(".", 1)[1])
        except ValueError:
            raise ParseError(f"bad sensor id in [{section}]", 0) from None
        sec = parser[section]
        try:
            role = sec["role"]
            vals = {k: float(sec[k]) for k in
                    ("x", "y", "z", "pitch_deg", "yaw_deg", "roll_deg")}
        except KeyError as e:
            raise ParseError(f"[{section}] missing field {e}", 0) from None
        except ValueError as e:
            raise ParseError(f"[{section}]: {e}", 0) from None
        if role not in ROLES:
            raise ParseError(f"[{section}] role must be one of {ROLES}, got {role!r}", 0)
        pose = SensorPose(x=vals["x"], y=vals["y"], z=vals["z"],
                          pitch=math.radians(vals["pitch_deg"]),
                          yaw=math.radians(vals["yaw_deg"]),
                          roll=math.radians(vals["roll_deg"]))
        records[sensor_id] = SensorRecord(sensor_id, role, pose)
    if not records:
        raise ParseError("pose file defines no sensors", 0)
    return records


def write_poses(path, records: dict[int, SensorRecord]) -> None:
    parser = configparser.ConfigParser()
    for sensor_id in sorted(records):
        r = records[sensor_id]
        parser[f"sensor.{sensor_id}"] = {
            "role": r.role,
            "x": f"{r.pose.x:.17g}",
            "y": f"{r.pose.y:.17g}",
            "z": f"{r.pose.z:.17g}",
            "pitch_deg": f"{math.degrees(r.pose.pitch):.17g}",
            "yaw_deg": f"{math.degrees(r.pose.yaw):.17g}",
            "roll_deg": f"{math.degrees(r.pose.roll):.17g}",
        }
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")
VELODYNE_DIRS = {"onboard": "velodyne_onboard", "roadside": "velodyne_roadside"}


def frame_id(i: int) -> str:
    return f"{i:06d}"


def frame_paths(root, split: str, fid: str) -> dict[str, Path]:
    """All per-frame file paths for one frame id under a dataset root."""
    base = Path(root) / split
    return {
        "onboard": base / VELODYNE_DIRS["onboard"] / f"{fid}.bin",
        "roadside": base / VELODYNE_DIRS["roadside"] / f"{fid}.bin",
        "label": base / "label" / f"{fid}.txt",
        "label_kitti": base / "label_kitti" / f"{fid}.txt",
        "visibility": base / "visibility" / f"{fid}.txt",
    }


def read_visibility(path) -> np.ndarray:
    """Read per-actor return counts: rows of (actor_index, onboard, roadside)."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", lineno)
            try:
                rows.append([int(v) for v in parts])
            except ValueError as e:
                raise ParseError(str(e), lineno) from None
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def write_visibility(path, counts: np.ndarray) -> None:
    lines = ["# actor_index onboard_returns roadside_returns"]
    for row in np.asarray(counts, dtype=np.int64).reshape(-1, 3):
        lines.append(f"{row[0]} {row[1]} {row[2]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(root) -> dict[str, list[str]]:
    """Read manifest.txt: lines of '<split> <frame_id>', grouped by split."""
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    out: dict[str, list[str]] = {s: [] for s in SPLITS}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in SPLITS:
                raise ParseError(f"bad manifest entry {line!r}", lineno)
            out[parts[0]].append(parts[1])
    return out


def write_manifest(root, splits: dict[str, list[str]]) -> None:
    lines = []
    for split in SPLITS:
        for fid in splits.get(split, []):
            lines.append(f"{split} {fid}")
    (Path(root) / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
