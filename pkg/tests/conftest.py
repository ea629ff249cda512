"""Shared fixtures: a small, fast model for unit tests.

The small scenario is deliberately mild (control penalty not tiny, short
horizon) so every unit test runs in well under a second; the calibrated
full-scale scenario lives in the acceptance suite only.
"""

import numpy as np
import pytest

from carbonfield.model import ProducerParams, RegulatorPolicy, build_state_space
from carbonfield.numkernel import TimeGrid


@pytest.fixture(scope="session")
def small_params() -> ProducerParams:
    return ProducerParams(
        c1=0.05, c3=1.0, p1=10.0, p2=100.0, rho0=60.0, rho1=0.5,
        kappa1=0.5, kappa2=0.2, alpha=4.0 * np.pi, theta=2.0,
        sigma0=0.05, sigma1=0.05, delta=0.3,
        demand_base=50.0, demand_amplitude=5.0,
        demand_frequency=2.0 * np.pi,
        xbar0=[0.0, 2.0, 0.0, 0.0, 0.0],
        var0=[0.0, 0.05, 0.0, 0.0, 0.0],
        re_bounds=(0.0, 20.0),
    )


@pytest.fixture(scope="session")
def small_policy() -> RegulatorPolicy:
    return RegulatorPolicy(tau=2.0, c2=50.0)


@pytest.fixture(scope="session")
def small_grid() -> TimeGrid:
    return TimeGrid(horizon=1.0, n_steps=40)


@pytest.fixture(scope="session")
def small_ss(small_params, small_policy, small_grid):
    return build_state_space(small_params, small_policy, 3.0, small_grid)
