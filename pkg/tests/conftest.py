from pathlib import Path

import numpy as np
import pytest

from dermclf.dataset import read_manifest
from dermclf.toydata import toy_config, write_toy_dataset

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    """14/7/7 fixture: two training images per category."""
    root = tmp_path_factory.mktemp("toy")
    write_toy_dataset(root)
    return root


@pytest.fixture(scope="session")
def toy_train(toy_root):
    return read_manifest(toy_root / "train_ground_truth.csv", "train", toy_root / "images")


@pytest.fixture(scope="session")
def toy_val(toy_root):
    return read_manifest(toy_root / "val_ground_truth.csv", "val", toy_root / "images")


@pytest.fixture
def toy_cfg(toy_root, tmp_path):
    cfg = toy_config(toy_root)
    return cfg.with_overrides(output=str(tmp_path / "run"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
