"""Binary and text format round-trips, pose parsing, box-frame conversion."""

import math

import numpy as np
import pytest

from pillarfuse.dataio import (
    LabelRecord,
    SensorRecord,
    array_to_records,
    carla_to_kitti,
    frame_id,
    kitti_to_carla,
    read_bin,
    read_labels,
    read_manifest,
    read_poses,
    read_visibility,
    records_to_array,
    write_bin,
    write_labels,
    write_manifest,
    write_poses,
    write_visibility,
)
from pillarfuse.errors import ParseError, TruncatedFile
from pillarfuse.geometry import GLOBAL, SensorPose, sensor_frame


class TestBin:
    def test_empty_round_trip(self, tmp_path):
        p = tmp_path / "e.bin"
        write_bin(p, _cloud(np.zeros((0, 4))))
        assert p.stat().st_size == 0
        assert len(read_bin(p, GLOBAL)) == 0

    def test_single_point(self, tmp_path):
        p = tmp_path / "one.bin"
        write_bin(p, _cloud(np.array([[1.0, 2.0, 3.0, 0.5]])))
        assert p.stat().st_size == 16
        out = read_bin(p, sensor_frame(0))
        np.testing.assert_array_equal(out.points, [[1.0, 2.0, 3.0, 0.5]])

    def test_bulk_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(0, 30, (100000, 4)).astype(np.float32).astype(np.float64)
        pts[:, 3] = rng.random(100000).astype(np.float32)
        p = tmp_path / "big.bin"
        write_bin(p, _cloud(pts))
        first = p.read_bytes()
        write_bin(p, read_bin(p, GLOBAL))
        assert p.read_bytes() == first

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 20)
        with pytest.raises(TruncatedFile):
            read_bin(p, GLOBAL)


def _cloud(pts):
    from pillarfuse.geometry import PointCloud
    return PointCloud(np.asarray(pts, dtype=np.float64), GLOBAL)


class TestLabels:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "l.txt"
        write_labels(p, [])
        assert read_labels(p) == []

    def test_single_line_round_trip(self, tmp_path):
        rec = LabelRecord("car", 1.7, 1.9, 4.6, 3.0, -2.0, 0.85, 0.3)
        p = tmp_path / "l.txt"
        write_labels(p, [rec])
        assert read_labels(p) == [rec]

    def test_bulk_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        recs = []
        for i in range(1000):
            vals = rng.normal(0, 10, 7)
            score = float(rng.random()) if i % 2 else None
            recs.append(LabelRecord("car" if i % 3 else "pedestrian",
                                    *[float(v) for v in vals], score=score))
        p = tmp_path / "l.txt"
        write_labels(p, recs)
        back = read_labels(p)
        assert len(back) == 1000
        for a, b in zip(recs, back):
            assert a.label == b.label
            for f in ("h", "w", "l", "x", "y", "z", "yaw"):
                assert abs(getattr(a, f) - getattr(b, f)) < 1e-12
            assert (a.score is None) == (b.score is None)
            if a.score is not None:
                assert abs(a.score - b.score) < 1e-12

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("car 1 2 3\n")
        with pytest.raises(ParseError) as ei:
            read_labels(p)
        assert ei.value.line == 1

    def test_bad_float_line_number(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("car 1 2 3 4 5 6 7\ncar 1 2 x 4 5 6 7\n")
        with pytest.raises(ParseError) as ei:
            read_labels(p)
        assert ei.value.line == 2

    def test_array_bridge(self):
        recs = [LabelRecord("car", 1.7, 1.9, 4.6, 1.0, 2.0, 0.85, 0.1)]
        arr = records_to_array(recs)
        np.testing.assert_array_equal(arr, [[1.0, 2.0, 0.85, 1.9, 4.6, 1.7, 0.1]])
        back = array_to_records(arr, ["car"])
        assert back == recs


class TestCarlaKitti:
    def test_origin_box_angle_remap(self):
        out = carla_to_kitti(np.array([[0, 0, 0, 1.9, 4.6, 1.7, 0.0]]))
        np.testing.assert_allclose(out[0, :3], 0.0)
        np.testing.assert_allclose(out[0, 3:6], [1.9, 4.6, 1.7])
        assert abs(out[0, 6] - (-math.pi / 2)) < 1e-15

    def test_axis_mapping_matches_matrix_oracle(self):
        # hand-built axis map: cam-x = global-y, cam-y = -global-z, cam-z = global-x
        M = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        for e in np.eye(3):
            box = np.array([[*e, 1, 1, 1, 0.0]])
            np.testing.assert_allclose(carla_to_kitti(box)[0, :3], M @ e, atol=1e-15)

    def test_involution(self):
        rng = np.random.default_rng(2)
        boxes = np.column_stack([rng.normal(0, 20, (200, 3)),
                                 rng.uniform(0.3, 5, (200, 3)),
                                 rng.uniform(-math.pi, math.pi, 200)])
        back = kitti_to_carla(carla_to_kitti(boxes))
        assert np.abs(back[:, :6] - boxes[:, :6]).max() < 1e-12
        dyaw = np.abs(np.mod(back[:, 6] - boxes[:, 6] + math.pi, 2 * math.pi) - math.pi)
        assert dyaw.max() < 1e-12

    def test_isometry(self):
        rng = np.random.default_rng(3)
        boxes = np.column_stack([rng.normal(0, 20, (50, 3)),
                                 rng.uniform(0.3, 5, (50, 3)),
                                 rng.uniform(-math.pi, math.pi, 50)])
        out = carla_to_kitti(boxes)
        np.testing.assert_array_equal(out[:, 3:6], boxes[:, 3:6])
        d_in = np.linalg.norm(boxes[None, :, :3] - boxes[:, None, :3], axis=-1)
        d_out = np.linalg.norm(out[None, :, :3] - out[:, None, :3], axis=-1)
        assert np.abs(d_in - d_out).max() < 1e-12


class TestPoses:
    def test_round_trip(self, tmp_path):
        recs = {
            0: SensorRecord(0, "onboard",
                            SensorPose(-18.0, -2.0, 1.74, 0.0, 0.3, 0.0)),
            1: SensorRecord(1, "roadside",
                            SensorPose(8.6, 8.6, 3.74, -0.1, 2.0, 0.05)),
        }
        p = tmp_path / "poses.cfg"
        write_poses(p, recs)
        back = read_poses(p)
        assert set(back) == {0, 1}
        for sid in recs:
            assert back[sid].role == recs[sid].role
            for f in ("x", "y", "z", "pitch", "yaw", "roll"):
                assert abs(getattr(back[sid].pose, f) - getattr(recs[sid].pose, f)) < 1e-12

    def test_degrees_converted(self, tmp_path):
        p = tmp_path / "poses.cfg"
        p.write_text("[sensor.0]\nrole = onboard\nx = 0\ny = 0\nz = 1.74\n"
                     "pitch_deg = 0\nyaw_deg = 90\nroll_deg = 0\n")
        pose = read_poses(p)[0].pose
        assert abs(pose.yaw - math.pi / 2) < 1e-12

    def test_bad_role(self, tmp_path):
        p = tmp_path / "poses.cfg"
        p.write_text("[sensor.0]\nrole = drone\nx = 0\ny = 0\nz = 0\n"
                     "pitch_deg = 0\nyaw_deg = 0\nroll_deg = 0\n")
        with pytest.raises(ParseError):
            read_poses(p)

    def test_missing_field(self, tmp_path):
        p = tmp_path / "poses.cfg"
        p.write_text("[sensor.0]\nrole = onboard\nx = 0\n")
        with pytest.raises(ParseError):
            read_poses(p)


class TestManifestVisibility:
    def test_manifest_round_trip(self, tmp_path):
        splits = {"train": [frame_id(i) for i in range(8)],
                  "val": [frame_id(8)], "test": [frame_id(9)]}
        write_manifest(tmp_path, splits)
        assert read_manifest(tmp_path) == splits

    def test_visibility_round_trip(self, tmp_path):
        counts = np.array([[0, 0, 55], [1, 120, 80]])
        p = tmp_path / "v.txt"
        write_visibility(p, counts)
        np.testing.assert_array_equal(read_visibility(p), counts)
