"""Shared, session-scoped experiment fixtures.

Pretraining and the default token-training run are expensive, so every test
that needs them shares one instance.
"""

import numpy as np
import pytest

from robtok.attacks import AttackConfig
from robtok.data import PretrainConfig, SyntheticDatasetSpec, generate_dataset, pretrain_backbone
from robtok.evaluation import train_linear_probe
from robtok.training import TrainConfig, train_loop
from robtok.vit import ViTConfig


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(SyntheticDatasetSpec())


@pytest.fixture(scope="session")
def backbone(dataset):
    return pretrain_backbone(ViTConfig(), dataset.split("train"), PretrainConfig())


@pytest.fixture(scope="session")
def default_run(backbone, dataset):
    """(tokens, record) of train_loop with default configs (wall time off for reproducibility)."""
    cfg = TrainConfig(record_wall_time=False)
    return train_loop(backbone, dataset.split("train").images, cfg, AttackConfig(), 10)


@pytest.fixture(scope="session")
def probes(backbone, dataset, default_run):
    """Linear heads on the probe split: (without tokens, with tokens)."""
    rob, _ = default_run
    p = dataset.split("probe")
    return train_linear_probe(backbone, None, p.images, p.labels), train_linear_probe(backbone, rob, p.images, p.labels)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).uniform(size=(2, 3, 32, 32))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
