import numpy as np
import pytest

from cemkit.degradations import DegradationSpec
from cemkit.imaging import ImageBuffer, gradient_magnitude
from cemkit.library import InterventionLibrary


def synthetic_library(
    pool_size=16,
    patch_size=8,
    channels=3,
    seed=0,
    lo=0.3,
    hi=0.7,
    degradation=None,
) -> InterventionLibrary:
    """In-memory library of mid-range random patches (no clamping risk)."""
    rng = np.random.default_rng(seed)
    pool = (rng.random((pool_size, patch_size, patch_size, channels)) * (hi - lo) + lo)
    pool = pool.astype(np.float32)
    g = np.array([gradient_magnitude(ImageBuffer._wrap(p)) for p in pool])
    return InterventionLibrary(
        patch_size=patch_size,
        channels=channels,
        pool=pool,
        g_values=g,
        degradation=degradation or DegradationSpec.dn(50.0),
        sources=[("synthetic", "0" * 64)],
        seed=seed,
        provenance=np.zeros((pool_size, 3), dtype=np.int64),
    )


def mid_image(height=64, width=64, channels=3, seed=1, lo=0.3, hi=0.7) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    return ImageBuffer(rng.random((height, width, channels)) * (hi - lo) + lo)


@pytest.fixture
def toy_library():
    return synthetic_library()


@pytest.fixture
def toy_image():
    return mid_image()
