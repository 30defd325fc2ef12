import numpy as np
import pytest

from craterkit.geometry import Box


def random_box(rng: np.random.Generator, min_side: float = 0.05, max_side: float = 0.5) -> Box:
    """Box with sides in [min_side, max_side] placed fully inside [0, 1]."""
    w = float(rng.uniform(min_side, max_side))
    h = float(rng.uniform(min_side, max_side))
    cx = float(rng.uniform(w / 2, 1 - w / 2))
    cy = float(rng.uniform(h / 2, 1 - h / 2))
    return Box(cx, cy, w, h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
