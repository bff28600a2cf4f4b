import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedhier.config import DatasetConfig, ExperimentConfig, ModelConfig  # noqa: E402
from fedhier.data import PartitionSpec, synthetic_digits  # noqa: E402
from fedhier.federation import HyperParams  # noqa: E402
from fedhier.models import MLP, MLR  # noqa: E402


@pytest.fixture(scope="session")
def digits():
    return synthetic_digits(n_per_class=120, seed=3)


def tiny_config(algorithm="sfedhp", T=4, **hp_over) -> ExperimentConfig:
    hp = dict(lambda1=15.0, lambda2=15.0, T=T, R=3, K=3, batch_size=10, N=2, J=2, S=1)
    hp.update(hp_over)
    return ExperimentConfig(
        algorithm=algorithm,
        model=ModelConfig(None, MLP, [8]),
        dataset=DatasetConfig("synthetic", synthetic_per_class=120, synthetic_seed=3),
        partition=PartitionSpec(4, 2, 30, 20, 0),
        hyperparams=HyperParams(**hp),
        eval_samples=20,
        objective_steps=2,
    )


def tiny_mlr_config(**kw) -> ExperimentConfig:
    cfg = tiny_config(**kw)
    cfg.model = ModelConfig(None, MLR, [], 1e-3)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace_hp(cfg, **kw):
    cfg.hyperparams = dataclasses.replace(cfg.hyperparams, **kw)
    return cfg


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
