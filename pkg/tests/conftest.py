import pytest

from pillarfuse import pipeline as P
from pillarfuse.config import resolve_config


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    """A 10-frame fixed-template dataset with pillar caches built."""
    root = tmp_path_factory.mktemp("ds")
    cfg = resolve_config(None, {"data_root": str(root), "n_frames": 10,
                                "scene": "crossroads"})
    P.synth_run(cfg)
    P.preprocess_dataset(cfg)
    return root


def make_cfg(data_root, run_dir, **over):
    base = {"data_root": str(data_root), "n_frames": 10, "scene": "crossroads",
            "run_dir": str(run_dir), "epochs": 2, "batch_size": 4}
    base.update(over)
    return resolve_config(None, base)
