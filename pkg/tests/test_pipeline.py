import numpy as np
import pytest
from conftest import make_cfg

from pillarfuse import dataio
from pillarfuse import pipeline as P
from pillarfuse.config import resolve_config
from pillarfuse.errors import DataError, DivergenceError, TruncatedFile


def _double(x):
    return 2 * x


class TestPmap:
    def test_matches_serial_order(self):
        items = list(range(7))
        assert P.pmap(_double, items, workers=3) == [0, 2, 4, 6, 8, 10, 12]

    def test_single_worker_never_forks(self):
        assert P.pmap(_double, [5], workers=4) == [10]


class TestPillarCache:
    def _fresh(self, data_root, tmp_path, fid="000000", role="onboard"):
        cfg = make_cfg(data_root, tmp_path)
        pose = dict(P._roles_and_poses(cfg, "train"))[role]
        return cfg, P.compute_pillars(cfg, "train", fid, role, pose)

    def test_round_trip_bit_exact(self, data_root, tmp_path):
        cfg, ps = self._fresh(data_root, tmp_path)
        path = tmp_path / "f.pfp"
        P.write_pillar_cache(path, ps, cfg.dataset_seed)
        back = P.read_pillar_cache(path, cfg.voxel_spec(),
                                   cfg.max_points_per_pillar, cfg.dataset_seed)
        np.testing.assert_array_equal(back.features, ps.features)
        np.testing.assert_array_equal(back.cell_index, ps.cell_index)
        np.testing.assert_array_equal(back.counts, ps.counts)

    def test_preprocessed_cache_matches_fresh_compute(self, data_root, tmp_path):
        cfg, ps = self._fresh(data_root, tmp_path)
        pose = dict(P._roles_and_poses(cfg, "train"))["onboard"]
        cached = P.load_pillars(cfg, "train", "000000", "onboard", pose)
        assert (data_root / "train" / P.CACHE_DIR / "000000_onboard.pfp").exists()
        np.testing.assert_array_equal(cached.features, ps.features)
        np.testing.assert_array_equal(cached.counts, ps.counts)

    def test_features_are_float32(self, data_root, tmp_path):
        _, ps = self._fresh(data_root, tmp_path)
        assert ps.features.dtype == np.float32

    def test_stale_cache_rejected(self, data_root, tmp_path):
        cfg, ps = self._fresh(data_root, tmp_path)
        path = tmp_path / "f.pfp"
        P.write_pillar_cache(path, ps, cfg.dataset_seed)
        with pytest.raises(DataError, match="rerun preprocess"):
            P.read_pillar_cache(path, cfg.voxel_spec(),
                                cfg.max_points_per_pillar, cfg.dataset_seed + 1)
        with pytest.raises(DataError, match="rerun preprocess"):
            P.read_pillar_cache(path, cfg.voxel_spec(), 16, cfg.dataset_seed)

    def test_bad_magic_and_truncation(self, data_root, tmp_path):
        cfg, ps = self._fresh(data_root, tmp_path)
        path = tmp_path / "f.pfp"
        P.write_pillar_cache(path, ps, cfg.dataset_seed)
        raw = path.read_bytes()
        spec = cfg.voxel_spec()
        n = cfg.max_points_per_pillar
        (tmp_path / "bad.pfp").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(DataError, match="not a pillar cache"):
            P.read_pillar_cache(tmp_path / "bad.pfp", spec, n, cfg.dataset_seed)
        (tmp_path / "cut.pfp").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(TruncatedFile):
            P.read_pillar_cache(tmp_path / "cut.pfp", spec, n, cfg.dataset_seed)
        (tmp_path / "stub.pfp").write_bytes(raw[:6])
        with pytest.raises(TruncatedFile):
            P.read_pillar_cache(tmp_path / "stub.pfp", spec, n, cfg.dataset_seed)

    def test_preprocess_job_count_and_rerun_bytes(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        sample = data_root / "train" / P.CACHE_DIR / "000001_roadside.pfp"
        before = sample.read_bytes()
        n = P.preprocess_dataset(resolve_config(None, {
            "data_root": str(data_root), "workers": 2}))
        assert n == 20  # 10 frames x 2 sensors
        assert sample.read_bytes() == before


class TestLoadSplit:
    def test_frame_structure(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        frames = P.load_split(cfg, "train")
        assert len(frames) == 8
        f = frames[0]
        assert f["fid"] == "000000"
        assert len(f["pillars"]) == 2  # cooperative: onboard then roadside
        assert f["gt_boxes"].shape == (len(f["gt_names"]), 7)
        assert set(f["occluded"]) == {"onboard", "roadside"}
        assert f["occluded"]["onboard"].shape == (len(f["gt_names"]),)
        assert "targets" not in f

    def test_single_sensor_modes(self, data_root, tmp_path):
        for mode in ("onboard-only", "roadside-only"):
            cfg = make_cfg(data_root, tmp_path, fusion_mode=mode)
            frames = P.load_split(cfg, "val")
            assert len(frames[0]["pillars"]) == 1
        on = make_cfg(data_root, tmp_path, fusion_mode="onboard-only")
        coop = make_cfg(data_root, tmp_path)
        a = P.load_split(on, "val")[0]["pillars"][0]
        b = P.load_split(coop, "val")[0]["pillars"][0]
        np.testing.assert_array_equal(a.features, b.features)

    def test_targets_attached(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        f = P.load_split(cfg, "val", with_targets=True)[0]
        states, loc, dirs, labels = f["targets"]
        n_anchors = (cfg.voxel_spec().H // 2) * (cfg.voxel_spec().W // 2) * 4
        assert states.shape == (n_anchors,)
        assert loc.shape == (n_anchors, 7)
        assert dirs.shape == (n_anchors,)
        assert labels.shape == (n_anchors,)
        assert (states == 1).sum() > 0

    def test_unknown_split_raises(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        with pytest.raises(DataError, match="unknown split"):
            P.load_split(cfg, "holdout")

    def test_hidden_actor_is_onboard_occluded(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        for f in P.load_split(cfg, "train"):
            assert f["occluded"]["onboard"][1]  # car behind the truck
            assert not f["occluded"]["roadside"][1]


class TestTraining:
    def test_batch_loss_parts_sum(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        frames = P.load_split(cfg, "train", with_targets=True)
        import pillarfuse.nn.tensor as T
        T.set_default_dtype(np.float32)
        net = P.build_net(cfg, np.random.default_rng(0))
        net.train()
        loss, (l_s, c_s, d_s, n_pos) = P.batch_loss(net, frames[:2],
                                                    cfg.loss_weights())
        assert np.isfinite(loss.data)
        assert n_pos > 0
        want = (2.0 * l_s + c_s + 0.2 * d_s) / max(n_pos, 1)
        np.testing.assert_allclose(float(loss.data), want, rtol=1e-6)

    def test_fit_net_loss_decreases(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path, epochs=4, batch_size=2)
        frames = P.load_split(cfg, "train", with_targets=True)[:4]
        import pillarfuse.nn.tensor as T
        T.set_default_dtype(np.float32)
        net = P.build_net(cfg, np.random.default_rng(1))
        rows = P.fit_net(net, frames, cfg, np.random.default_rng(1))
        assert len(rows) == 4 * 2
        first = np.mean([r[2] for r in rows if r[0] == 0])
        last = np.mean([r[2] for r in rows if r[0] == 3])
        assert last < first

    def test_fit_net_requires_targets(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        frames = P.load_split(cfg, "train")
        net = P.build_net(cfg, np.random.default_rng(0))
        with pytest.raises(DataError, match="targets"):
            P.fit_net(net, frames, cfg, np.random.default_rng(0))
        with pytest.raises(DataError, match="no training frames"):
            P.fit_net(net, [], cfg, np.random.default_rng(0))

    def test_divergence_raises(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        frames = P.load_split(cfg, "train", with_targets=True)[:2]
        import pillarfuse.nn.tensor as T
        T.set_default_dtype(np.float32)
        net = P.build_net(cfg, np.random.default_rng(0))
        net.head.cls.weight.data[:] = np.nan
        with pytest.raises(DivergenceError, match="epoch 0, step 0"):
            P.fit_net(net, frames, cfg, np.random.default_rng(0))

    def test_train_run_outputs_and_determinism(self, data_root, tmp_path):
        cfg_a = make_cfg(data_root, tmp_path / "a")
        cfg_b = make_cfg(data_root, tmp_path / "b")
        ckpt_a = P.train_run(cfg_a)
        ckpt_b = P.train_run(cfg_b)
        assert ckpt_a.exists()
        log_a = (tmp_path / "a" / "loss_log.csv").read_text()
        log_b = (tmp_path / "b" / "loss_log.csv").read_text()
        assert log_a == log_b
        assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
        lines = log_a.strip().split("\n")
        assert lines[0] == "epoch,step,loss,loc,cls,dir,n_pos"
        assert len(lines) == 1 + 2 * 2  # 2 epochs x ceil(8/4) steps
        for line in lines[1:]:
            e, s, total, loc, c, d, n_pos = line.split(",")
            np.testing.assert_allclose(
                float(total), float(loc) + float(c) + float(d), rtol=1e-5)


class TestInferEval:
    def test_infer_without_checkpoint_raises(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        with pytest.raises(DataError, match="train first"):
            P.infer_run(cfg)

    def test_train_infer_eval_round_trip(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path / "run")
        P.train_run(cfg)
        dets = P.infer_run(cfg, split="test")
        det_dir = tmp_path / "run" / "detections" / "test"
        assert sorted(d.name for d in det_dir.glob("*.txt")) == ["000000.txt"]
        loaded = P.load_detections(det_dir, sorted(dets))
        for fid, (boxes, names, scores) in dets.items():
            if len(boxes) == 0:
                assert fid not in loaded or len(loaded[fid][0]) == 0
                continue
            np.testing.assert_array_equal(loaded[fid][0], boxes)
            np.testing.assert_array_equal(loaded[fid][2], scores)
        rows = P.eval_run(cfg, split="test")
        assert [r["modality"] for r in rows] == ["bev", "3d"]
        assert all(r["method"] == "cooperative" for r in rows)
        assert (tmp_path / "run" / "report.txt").exists()
        assert (tmp_path / "run" / "report.csv").exists()

    def test_perfect_detections_score_full_map(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        gts = P.load_ground_truth(cfg, "test")
        perfect = {fid: (boxes, list(names), np.ones(len(names)))
                   for fid, (boxes, names) in gts.items()}
        rows = P.eval_run(cfg, split="test", detections=perfect)
        assert rows[0]["map"] == 1.0
        assert rows[1]["map"] == 1.0

    def test_detections_without_scores_rejected(self, data_root, tmp_path):
        recs = [dataio.LabelRecord("car", 1.5, 1.8, 4.0, 1, 2, 0, 0.3)]
        det_dir = tmp_path / "dets"
        det_dir.mkdir()
        dataio.write_labels(det_dir / "000009.txt", recs)
        with pytest.raises(DataError, match="without scores"):
            P.load_detections(det_dir, ["000009"])

    def test_missing_detection_file_means_no_dets(self, tmp_path):
        assert P.load_detections(tmp_path, ["000123"]) == {}

    def test_blind_spot_recall_on_perfect_dets(self, data_root, tmp_path):
        cfg = make_cfg(data_root, tmp_path)
        frames = P.load_split(cfg, "train")
        perfect = {f["fid"]: (f["gt_boxes"], list(f["gt_names"]),
                              np.ones(len(f["gt_names"])))
                   for f in frames}
        assert P.blind_spot_recall(cfg, perfect, frames, "onboard") == 1.0
        empty = {f["fid"]: (np.zeros((0, 7)), [], np.zeros(0)) for f in frames}
        assert P.blind_spot_recall(cfg, empty, frames, "onboard") == 0.0


class TestSynthRun:
    def test_scene_template_switch(self, tmp_path):
        fixed = resolve_config(None, {"data_root": str(tmp_path / "f"),
                                      "n_frames": 6, "scene": "crossroads",
                                      "dataset_seed": 3})
        varied = resolve_config(None, {"data_root": str(tmp_path / "v"),
                                       "n_frames": 6,
                                       "scene": "crossroads-varied",
                                       "dataset_seed": 3})
        P.synth_run(fixed)
        P.synth_run(varied)
        n_fixed, n_varied = [], []
        for root, acc in ((tmp_path / "f", n_fixed), (tmp_path / "v", n_varied)):
            man = dataio.read_manifest(root)
            assert sum(len(v) for v in man.values()) == 6
            for split, fids in man.items():
                for fid in fids:
                    paths = dataio.frame_paths(root, split, fid)
                    acc.append(len(dataio.read_labels(paths["label"])))
        assert all(n == 8 for n in n_fixed)
        assert any(n < 8 for n in n_varied)
