import numpy as np
import pytest

from ptxseg import dataset as ds


@pytest.fixture
def synthetic_root(tmp_path):
    """Small deterministic dataset: 12 pairs at 64x64, 3 of them negative."""
    root = tmp_path / "data"
    ds.make_synthetic(root, n=12, resolution=64, seed=7)
    return root


@pytest.fixture
def manifest(synthetic_root):
    return ds.load_manifest(
        synthetic_root / ds.IMAGES_DIRNAME,
        synthetic_root / ds.MASKS_DIRNAME,
        seed=0,
    )


def random_binary_mask(rng, shape, density=0.4):
    return (rng.random(shape) < density).astype(np.uint8)
