import numpy as np
import pytest


@pytest.fixture
def rng():
    """Fresh deterministic generator per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(tmp_path_factory):
    """A small on-disk synthetic dataset shared across a test session."""
    from protoseg.data import generate_dataset

    root = tmp_path_factory.getbasetemp() / "tiny_ds"
    if not (root / "meta.json").exists():
        generate_dataset(root, num_images=192, image_size=32, seed=99)
    return root
