import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from simprop.data import SyntheticConfig, generate_dataset, read_manifest


def tiny_synth_config(**overrides) -> SyntheticConfig:
    """Small dataset config shared by training/CLI tests."""
    base = dict(
        image_size=16,
        n_classes=3,
        samples_per_class=4,
        train_classes=(0, 1),
        test_classes=(2,),
    )
    base.update(overrides)
    return SyntheticConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Generated-once tiny dataset; tests must not mutate it."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = tiny_synth_config()
    generate_dataset(cfg, seed=0, out_dir=root)
    return read_manifest(root / "manifest.txt")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
