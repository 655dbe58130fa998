import numpy as np
import pytest
from hypothesis import strategies as st

from mobility_ot.cone import ParticleConfig


def random_config(rng, n, M=1.0, spread=(0.05, 2.0), shift=1.0):
    """Ordered configuration with every gap at least 1/(nM)."""
    gaps = (1.0 + rng.uniform(*spread, n)) / (n * M)
    return ParticleConfig(rng.uniform(-shift, shift) + np.concatenate([[0.0], np.cumsum(gaps)]), M)


@st.composite
def configs(draw, n_min=1, n_max=12, M=1.0, min_extra=0.0):
    n = draw(st.integers(n_min, n_max))
    extra = draw(st.lists(st.floats(min_extra, 3.0), min_size=n, max_size=n))
    x0 = draw(st.floats(-5.0, 5.0))
    gaps = (1.0 + np.asarray(extra)) / (n * M)
    return ParticleConfig(x0 + np.concatenate([[0.0], np.cumsum(gaps)]), M)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
