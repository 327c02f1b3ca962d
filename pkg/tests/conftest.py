from __future__ import annotations

import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Trained models shared by the pipeline, CLI and acceptance tests. Each is
# trained once per session; the cost is paid by whichever test asks first.

WORLD_SEED = 7
HSFA_STEPS = 800


@pytest.fixture(scope="session")
def world7():
    from roitrack.synthetic import SyntheticWorld, WorldConfig

    return SyntheticWorld(WorldConfig(seed=WORLD_SEED))


def _train_hsfa(world, n_layers, steps=HSFA_STEPS):
    from roitrack.hsfa import HsfaConfig, HsfaModel
    from roitrack.optim import TrainConfig
    from roitrack.training import train_hsfa

    model = HsfaModel.init(HsfaConfig(channels=32, n_layers=n_layers, view_count=4, scale=2), seed=WORLD_SEED)
    cfg = TrainConfig(eta0=3e-3, warmup=100, total_steps=steps, batch=8, seed=WORLD_SEED)
    trace = train_hsfa(model, world, cfg, erase_prob=0.25)
    return model, trace


@pytest.fixture(scope="session")
def hsfa3(world7):
    return _train_hsfa(world7, 3)


@pytest.fixture(scope="session")
def hsfa0(world7):
    return _train_hsfa(world7, 0)


@pytest.fixture(scope="session")
def tom_pipeline(world7):
    """1-layer verifier for the two-archetype world, with its held-out split."""
    from roitrack.optim import TrainConfig
    from roitrack.tom import TomModel
    from roitrack.trackdata import TrackDatasetConfig, generate_tracking_dataset
    from roitrack.training import train_tom

    ds = generate_tracking_dataset(world7, TrackDatasetConfig(n_pairs=4000, seed=WORLD_SEED))
    train_set, test_set = ds.split(0.2)
    model = TomModel.init(1, world7.channels, seed=WORLD_SEED)
    train_tom(model, train_set, TrainConfig(eta0=3e-3, warmup=0, total_steps=10 * len(train_set) // 64,
                                            batch=64, seed=WORLD_SEED, clip=None))
    return model, test_set


@pytest.fixture(scope="session")
def saved_models(tmp_path_factory, hsfa3, tom_pipeline):
    from roitrack import hsfa, tom

    root = tmp_path_factory.mktemp("models")
    hsfa.save_checkpoint(hsfa3[0], root / "som.ckpt")
    tom.save_checkpoint(tom_pipeline[0], root / "tom.ckpt")
    return root / "som.ckpt", root / "tom.ckpt"


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory, saved_models):
    """Two complete passes over every subcommand with identical seeds."""
    from cli_runs import run_all

    root = tmp_path_factory.mktemp("cli")
    inputs = root / "inputs"
    inputs.mkdir()
    return [run_all(root / f"run{i}", *saved_models, inputs) for i in range(2)], inputs


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
