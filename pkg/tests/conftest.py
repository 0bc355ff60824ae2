from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage


def random_mask(rng: np.random.Generator, shape, density: float | None = None, smooth: bool | None = None) -> np.ndarray:
    """Random binary mask: either salt noise or smoothed blobs."""
    density = rng.uniform(0.05, 0.4) if density is None else density
    smooth = bool(rng.integers(2)) if smooth is None else smooth
    if smooth:
        field = ndimage.gaussian_filter(rng.random(shape), sigma=1.0)
        return field > np.quantile(field, 1 - density)
    return rng.random(shape) < density


def random_pair(rng: np.random.Generator, max_side: int = 12):
    shape = tuple(int(s) for s in rng.integers(4, max_side + 1, size=3))
    a = random_mask(rng, shape)
    mode = rng.integers(4)
    if mode == 0:
        b = random_mask(rng, shape)
    elif mode == 1:
        b = np.roll(a, int(rng.integers(-2, 3)), axis=int(rng.integers(3)))
    elif mode == 2:
        b = a ^ (rng.random(shape) < 0.05)
    else:
        b = ndimage.binary_dilation(a) if rng.random() < 0.5 else ndimage.binary_erosion(a)
    spacing = tuple(float(s) for s in rng.uniform(0.4, 2.5, size=3))
    return a, b, spacing


@pytest.fixture
def rng():
    return np.random.default_rng(20251015)
