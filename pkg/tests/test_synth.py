import numpy as np
import pytest

from pillarfuse import dataio
from pillarfuse.errors import DataError, DegenerateBox
from pillarfuse.geometry import SensorPose, rotation_matrix
from pillarfuse.synth import (
    DESK_ONBOARD_LIDAR,
    DESK_ROADSIDE_LIDAR,
    GROUND_ID,
    INTENSITY,
    ONBOARD_POSE,
    ROADSIDE_POSE,
    LidarModel,
    Scene,
    SceneBox,
    crossroads_scene,
    generate_dataset,
    ray_directions,
    split_counts,
    trace,
    varied_crossroads_scene,
)


def _to_global(cloud, pose):
    return cloud.xyz @ rotation_matrix(pose).T + pose.translation


class TestLidarModel:
    def test_validation(self):
        with pytest.raises(DataError):
            LidarModel(max_range=0.0)
        with pytest.raises(DataError):
            LidarModel(sigma=-0.1)
        with pytest.raises(DataError):
            LidarModel(dropout=1.0)

    def test_scene_box_validation(self):
        with pytest.raises(DegenerateBox):
            SceneBox("car", [0, 0, 0, 0.0, 4.6, 1.7, 0])


class TestRayDirections:
    def test_count_and_norms(self):
        model = LidarModel(channels=16, h_step_deg=1.0)
        d = ray_directions(model)
        assert d.shape == (16 * 360, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_elevation_span(self):
        model = LidarModel(channels=8, v_fov_deg=(-20.0, 4.0))
        d = ray_directions(model)
        np.testing.assert_allclose(d[:, 2].min(), np.sin(np.deg2rad(-20.0)),
                                   atol=1e-12)
        np.testing.assert_allclose(d[:, 2].max(), np.sin(np.deg2rad(4.0)),
                                   atol=1e-12)

    def test_azimuth_covers_all_quadrants(self):
        d = ray_directions(LidarModel(channels=1, v_fov_deg=(0.0, 0.0)))
        assert (d[:, 0] > 0.5).any() and (d[:, 0] < -0.5).any()
        assert (d[:, 1] > 0.5).any() and (d[:, 1] < -0.5).any()


class TestTrace:
    def test_ground_return_range(self):
        # single downward channel: range = height / sin(depression)
        model = LidarModel(channels=1, v_fov_deg=(-30.0, -30.0), h_step_deg=1.0,
                           sigma=0.0)
        pose = SensorPose(x=0.0, y=0.0, z=2.0)
        cloud, ids = trace(Scene(actors=[]), pose, model, seed=0)
        assert len(cloud.points) == 360
        np.testing.assert_allclose(np.linalg.norm(cloud.xyz, axis=1), 4.0,
                                   atol=1e-12)
        np.testing.assert_allclose(cloud.xyz[:, 2], -2.0, atol=1e-12)
        assert np.all(ids == GROUND_ID)
        np.testing.assert_allclose(cloud.intensity, INTENSITY["ground"])

    def test_first_hit_occlusion(self):
        # same-size box directly behind another returns nothing
        model = LidarModel(channels=1, v_fov_deg=(0.0, 0.0), sigma=0.0)
        near = SceneBox("car", [5.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0])
        far = SceneBox("car", [10.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0])
        pose = SensorPose(x=0.0, y=0.0, z=1.0)
        _, ids = trace(Scene(actors=[near, far]), pose, model, seed=0)
        assert np.sum(ids == 0) > 0
        assert np.sum(ids == 1) == 0

    def test_removing_the_blocker_reveals_the_far_box(self):
        model = LidarModel(channels=1, v_fov_deg=(0.0, 0.0), sigma=0.0)
        far = SceneBox("car", [10.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0])
        pose = SensorPose(x=0.0, y=0.0, z=1.0)
        _, ids = trace(Scene(actors=[far]), pose, model, seed=0)
        assert np.sum(ids == 0) > 0

    def test_max_range_cutoff(self):
        model = LidarModel(channels=1, v_fov_deg=(0.0, 0.0), sigma=0.0,
                           max_range=8.0)
        far = SceneBox("car", [10.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0])
        _, ids = trace(Scene(actors=[far]), SensorPose(x=0.0, y=0.0, z=1.0),
                       model, seed=0)
        assert len(ids) == 0

    def test_intensity_keyed_by_class(self):
        model = LidarModel(channels=4, v_fov_deg=(-10.0, 0.0), sigma=0.0)
        ped = SceneBox("pedestrian", [4.0, 0.0, 0.9, 0.5, 0.5, 1.8, 0.0])
        pose = SensorPose(x=0.0, y=0.0, z=1.5)
        cloud, ids = trace(Scene(actors=[ped]), pose, model, seed=0)
        hit = ids == 0
        assert hit.any()
        np.testing.assert_allclose(cloud.intensity[hit], INTENSITY["pedestrian"])

    def test_determinism_and_seed_sensitivity(self):
        scene = crossroads_scene(np.random.default_rng(5))
        a, ids_a = trace(scene, ONBOARD_POSE, DESK_ONBOARD_LIDAR, [1, 2])
        b, ids_b = trace(scene, ONBOARD_POSE, DESK_ONBOARD_LIDAR, [1, 2])
        c, _ = trace(scene, ONBOARD_POSE, DESK_ONBOARD_LIDAR, [1, 3])
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(ids_a, ids_b)
        assert not np.array_equal(a.points, c.points)

    def test_dropout_thins_returns(self):
        scene = crossroads_scene(np.random.default_rng(6))
        full, _ = trace(scene, ONBOARD_POSE, DESK_ONBOARD_LIDAR, [0])
        from dataclasses import replace
        half, _ = trace(scene, ONBOARD_POSE,
                        replace(DESK_ONBOARD_LIDAR, dropout=0.5), [0])
        ratio = len(half.points) / len(full.points)
        assert 0.45 < ratio < 0.55

    def test_point_to_surface_distance_oracle(self):
        # 64 x 1024 rays over a 10-actor scene: every return within 4 sigma
        # of an actor surface or the ground plane
        rng = np.random.default_rng(7)
        actors = []
        for k in range(6):
            ang = 2 * np.pi * k / 6 + rng.uniform(-0.2, 0.2)
            r = rng.uniform(6.0, 18.0)
            actors.append(SceneBox("car", [r * np.cos(ang), r * np.sin(ang),
                                           0.85, 1.9, 4.6, 1.7,
                                           rng.uniform(-np.pi, np.pi)]))
        for k in range(4):
            ang = 2 * np.pi * (k + 0.5) / 4
            r = rng.uniform(5.0, 12.0)
            actors.append(SceneBox("pedestrian",
                                   [r * np.cos(ang), r * np.sin(ang), 0.9,
                                    0.5, 0.5, 1.8, 0.0]))
        scene = Scene(actors=actors)
        model = LidarModel(channels=64, h_step_deg=360.0 / 1024, sigma=0.01,
                           max_range=60.0)
        pose = SensorPose(x=0.0, y=0.0, z=3.0, yaw=0.4)
        cloud, ids = trace(scene, pose, model, seed=9)
        assert cloud.points.shape == (len(ids), 4)
        pts = _to_global(cloud, pose)
        dist = np.abs(pts[:, 2])  # ground plane
        for a in actors:
            box = a.box
            cy, sy = np.cos(box[6]), np.sin(box[6])
            rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
            local = (pts - box[:3]) @ rot
            q = np.abs(local) - np.array([box[4], box[3], box[5]]) / 2.0
            sdf = (np.linalg.norm(np.maximum(q, 0.0), axis=1)
                   + np.minimum(q.max(axis=1), 0.0))
            dist = np.minimum(dist, np.abs(sdf))
        assert dist.max() < 4.0 * model.sigma

    def test_counts_non_increasing_with_distance(self):
        model = LidarModel(sigma=0.0)
        pose = SensorPose(x=0.0, y=0.0, z=1.74)
        counts = []
        for d in (8.0, 12.0, 16.0, 20.0, 24.0):
            car = SceneBox("car", [d, 0.0, 0.85, 1.9, 4.6, 1.7, 0.0])
            _, ids = trace(Scene(actors=[car]), pose, model, seed=0)
            counts.append(int(np.sum(ids == 0)))
        assert counts[0] > 0
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_cross_sensor_surface_agreement(self):
        # both sensors face the same wall surface; their clouds interleave
        wall = SceneBox("building", [0.0, 10.0, 2.0, 0.4, 16.0, 4.0, 0.0])
        scene = Scene(actors=[wall])
        pose_a = SensorPose(x=-3.0, y=0.0, z=1.74, yaw=0.7)
        pose_b = SensorPose(x=3.0, y=0.0, z=3.74, yaw=-0.4)
        model_a = LidarModel(sigma=0.01)
        model_b = LidarModel(v_fov_deg=(-60.0, 5.0), sigma=0.01)
        ca, ia = trace(scene, pose_a, model_a, seed=1)
        cb, ib = trace(scene, pose_b, model_b, seed=2)
        pa = _to_global(ca, pose_a)[ia == 0]
        pb = _to_global(cb, pose_b)[ib == 0]
        assert len(pa) > 200 and len(pb) > 200
        # coverage boundaries (wall base, top, ends) differ between the two
        # vantage points, so compare interior points only
        interior = (np.abs(pa[:, 0]) < 6.0) & (pa[:, 2] > 0.7) & (pa[:, 2] < 2.5)
        rng = np.random.default_rng(3)
        sub = pa[interior][rng.choice(interior.sum(), 300, replace=False)]
        d2 = ((sub[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
        nn = np.sqrt(d2.min(axis=1))
        # worst case: half the coarse sensor's row spacing on the wall
        # (distance * pitch / cos^2 elevation, ~0.55 m at the far end) + noise
        assert nn.max() < 3 * 0.01 + 0.32
        assert np.median(nn) < 0.15


class TestCrossroadsTemplate:
    def test_engineered_blind_spots(self):
        for seed in range(4):
            scene = crossroads_scene(np.random.default_rng(seed))
            assert len(scene.actors) == 8
            _, ids_on = trace(scene, ONBOARD_POSE, DESK_ONBOARD_LIDAR, [seed, 0])
            _, ids_rs = trace(scene, ROADSIDE_POSE, DESK_ROADSIDE_LIDAR, [seed, 1])
            on = np.array([np.sum(ids_on == a) for a in range(8)])
            rs = np.array([np.sum(ids_rs == a) for a in range(8)])
            # hidden car: zero onboard returns, plenty from the roadside pole
            assert on[1] == 0 and rs[1] >= 20
            # north car and blind pedestrian sit behind the corner building
            assert on[2] == 0 and rs[2] >= 20
            assert on[6] == 0 and rs[6] >= 20
            # shadow car: hidden from the roadside pole by the box truck
            assert rs[5] == 0 and on[5] >= 20

    def test_actors_inside_global_window(self):
        for seed in range(4):
            scene = crossroads_scene(np.random.default_rng(seed))
            for a in scene.actors:
                r = np.hypot(a.box[3], a.box[4]) / 2
                assert abs(a.box[0]) + r < 25.6
                assert abs(a.box[1]) + r < 25.6
                assert a.box[2] - a.box[5] / 2 >= -1e-9
                assert a.box[2] + a.box[5] / 2 < 4.0

    def test_classes(self):
        scene = crossroads_scene(np.random.default_rng(0))
        labels = [a.label for a in scene.actors]
        assert labels.count("car") == 6
        assert labels.count("pedestrian") == 2

    def test_varied_presence(self):
        sizes = []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            scene = varied_crossroads_scene(rng)
            sizes.append(len(scene.actors))
            assert 2 <= len(scene.actors) <= 8
            # the truck / hidden-car pair anchors every frame
            assert scene.actors[0].box[5] > 3.0
            assert scene.actors[1].label == "car"
            again = varied_crossroads_scene(np.random.default_rng(seed))
            assert len(again.actors) == len(scene.actors)
            np.testing.assert_array_equal(again.actors[-1].box,
                                          scene.actors[-1].box)
        assert min(sizes) < 8 and max(sizes) > 4


class TestSplitCounts:
    def test_ten_frames(self):
        assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]

    def test_remainder_allocation(self):
        assert sum(split_counts(7, (0.5, 0.25, 0.25))) == 7
        assert split_counts(200, (0.8, 0.1, 0.1)) == [160, 20, 20]

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            split_counts(10, (0.8, 0.1, 0.2))


class TestGenerateDataset:
    def test_layout_and_split(self, tmp_path):
        counts = generate_dataset(tmp_path / "ds", 10, master_seed=7)
        assert counts == {"train": 8, "val": 1, "test": 1}
        manifest = dataio.read_manifest(tmp_path / "ds")
        assert [len(manifest[s]) for s in dataio.SPLITS] == [8, 1, 1]
        paths = dataio.frame_paths(tmp_path / "ds", "train", "000003")
        for p in paths.values():
            assert p.exists()

    def test_labels_and_visibility(self, tmp_path):
        generate_dataset(tmp_path / "ds", 4, master_seed=3)
        paths = dataio.frame_paths(tmp_path / "ds", "train", "000001")
        records = dataio.read_labels(paths["label"])
        assert len(records) == 8
        assert {r.label for r in records} == {"car", "pedestrian"}
        kitti = dataio.read_labels(paths["label_kitti"])
        want = dataio.carla_to_kitti(dataio.records_to_array(records))
        got = dataio.records_to_array(kitti)
        np.testing.assert_allclose(got, want, atol=1e-12)
        vis = dataio.read_visibility(paths["visibility"])
        assert vis.shape == (8, 3)
        assert vis[1, 1] == 0 and vis[1, 2] >= 20
        poses = dataio.read_poses(tmp_path / "ds" / "train" / "poses.cfg")
        assert poses[0].role == "onboard" and poses[1].role == "roadside"
        assert abs(poses[1].pose.z - 3.74) < 1e-12

    def test_same_seed_is_byte_identical(self, tmp_path):
        generate_dataset(tmp_path / "a", 6, master_seed=11)
        generate_dataset(tmp_path / "b", 6, master_seed=11)
        files_a = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b")
                         for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_different_seed_differs(self, tmp_path):
        generate_dataset(tmp_path / "a", 2, master_seed=1)
        generate_dataset(tmp_path / "b", 2, master_seed=2)
        pa = dataio.frame_paths(tmp_path / "a", "train", "000000")["onboard"]
        pb = dataio.frame_paths(tmp_path / "b", "train", "000000")["onboard"]
        assert pa.read_bytes() != pb.read_bytes()

    def test_clouds_parse_in_sensor_frame(self, tmp_path):
        generate_dataset(tmp_path / "ds", 2, master_seed=5)
        paths = dataio.frame_paths(tmp_path / "ds", "train", "000000")
        cloud = dataio.read_bin(paths["onboard"], frame="sensor:0")
        assert len(cloud.points) > 1000
        # onboard sensor sits 1.74 m up; ground returns land near z = -1.74
        ground = cloud.xyz[:, 2] < -1.5
        assert ground.sum() > 100
