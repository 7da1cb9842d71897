import math

import numpy as np
import pytest

from twomode.gaussian import (
    GaussianState,
    apply_transform,
    beamsplitter_transform,
    phase_transform,
    squeeze_transform,
    thermal_state,
)


def random_physical_state(rng: np.random.Generator, max_log_squeeze: float = 1.2) -> GaussianState:
    """Thermal product state pushed through a random chain of local squeezers, phases and beam splitters."""
    state = thermal_state(0.5 + rng.exponential(0.3), 0.5 + rng.exponential(0.3))
    for _ in range(3):
        s = math.exp(rng.uniform(-max_log_squeeze, max_log_squeeze))
        m = (
            phase_transform(*rng.uniform(0, 2 * np.pi, 2))
            @ beamsplitter_transform(rng.uniform(0.05, 0.95))
            @ phase_transform(*rng.uniform(0, 2 * np.pi, 2))
            @ squeeze_transform(s)
        )
        state = apply_transform(state, m)
    return GaussianState(rng.normal(0, 0.3, 4), state.sigma)


def tmsv_sigma(r: float) -> np.ndarray:
    """Two-mode squeezed vacuum written out directly."""
    c, s = math.cosh(2 * r) / 2, math.sinh(2 * r) / 2
    return np.array(
        [
            [c, 0, s, 0],
            [0, c, 0, -s],
            [s, 0, c, 0],
            [0, -s, 0, c],
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def random_states():
    rng = np.random.default_rng(2024)
    return [random_physical_state(rng) for _ in range(100)]
