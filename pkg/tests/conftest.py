import numpy as np
import pytest

from asd.models import NetSpec
from asd.toyworld import WorldSpec, default_world


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_world():
    """3-dim, 4-frame world: big enough to be non-trivial, cheap to sample."""
    return default_world(dim=3, length=4, transition_scale=0.8, noise_scale=0.25, seed=3)


@pytest.fixture
def tiny_net_spec():
    """Small net so whole-model finite differencing stays fast."""
    return NetSpec(frame_dim=3, hidden=(8, 7), skip=True)


@pytest.fixture
def degenerate_world():
    """Zero dynamics and zero noise: frames 2..L collapse deterministically."""
    d = 3
    return WorldSpec(
        dim=d,
        length=4,
        transition=np.zeros((d, d)),
        drift=np.zeros(d),
        noise_chol=np.zeros((d, d)),
        init_mean=np.zeros(d),
        init_cov_chol=np.eye(d),
    )
