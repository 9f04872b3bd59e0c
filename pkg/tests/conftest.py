import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_OVERRIDES = {
    "gen.image_size": 16, "gen.train_per_class": 3, "gen.val_per_class": 2, "gen.test_per_class": 2,
    "model.stages": "4,8", "model.head_hidden": 8, "model.head_out": 6, "darkener.widths": "4,4",
    "pretrain.steps": 6, "pretrain.batch_size": 8, "darkener.steps": 4, "darkener.batch_size": 4,
    "adapt.steps": 4, "adapt.batch_size": 4, "train.eval_every": 3,
}


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """A small generated dataset shared by trainer and CLI tests."""
    from duskforge.data import ShapeSceneSpec, generate_shapescenes

    root = tmp_path_factory.mktemp("tiny_data")
    generate_shapescenes(ShapeSceneSpec(image_size=16, train_per_class=3, val_per_class=2, test_per_class=2),
                         0, root)
    return root


@pytest.fixture
def tiny_cfg(tiny_root):
    from duskforge.config import Config

    return Config({**TINY_OVERRIDES, "data.root": str(tiny_root)})


# Reduced step counts used for the end-to-end acceptance runs; the full
# defaults do not fit the time budget on one CPU core.
ACCEPTANCE_PROFILE = {
    "pretrain.steps": 800, "darkener.steps": 400, "darkener.lr": 2e-3,
    "adapt.steps": 300, "adapt.lr": 5e-4, "train.eval_every": 100,
}
ACCEPTANCE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    """Full three-stage runs on the default shape-scene dataset, one per seed.

    Set DUSKFORGE_ACCEPTANCE_DIR to keep the run directories for inspection.
    """
    import json
    import os
    import time
    from pathlib import Path

    from duskforge.config import Config
    from duskforge.data import ShapeSceneSpec, generate_shapescenes
    from duskforge.trainer import run_pipeline

    base = os.environ.get("DUSKFORGE_ACCEPTANCE_DIR")
    base = Path(base) if base else tmp_path_factory.mktemp("acceptance")
    data = base / "data"
    generate_shapescenes(ShapeSceneSpec(), 0, data)
    runs = {}
    for seed in ACCEPTANCE_SEEDS:
        cfg = Config({**ACCEPTANCE_PROFILE, "data.root": str(data), "train.seed": seed})
        start = time.perf_counter()
        result = run_pipeline(cfg, base / f"seed{seed}")
        result["seconds"] = time.perf_counter() - start
        runs[seed] = {"cfg": cfg, "root": base / f"seed{seed}", "result": result}
    (base / "acceptance_runs.json").write_text(
        json.dumps({s: r["result"] for s, r in runs.items()}, indent=2, default=str), encoding="utf-8")
    return runs

