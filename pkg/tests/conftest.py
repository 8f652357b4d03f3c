import numpy as np
import pytest

from qgml.constants import DAY
from qgml.covariance import CovarianceConfig
from qgml.qg import (
    GridSpec,
    ModelState,
    QgParams,
    generate_trajectory,
    initial_jet_state,
    perturbed_params,
    reference_params,
)

SMALL_GRID = GridSpec(nx=8, ny=4)
# Short correlation length keeps B well conditioned on the coarse grid
SMALL_COVARIANCE = CovarianceConfig(horiz_corr_len=0.1, vert_corr=0.2, std_b=0.5)


@pytest.fixture
def grid() -> GridSpec:
    return SMALL_GRID


@pytest.fixture
def true_params() -> QgParams:
    return reference_params(SMALL_GRID)


@pytest.fixture
def original_params() -> QgParams:
    return perturbed_params(SMALL_GRID)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def spun_up_state() -> ModelState:
    """Reference-model state two days after the initial jet."""
    params = reference_params(SMALL_GRID)
    traj = generate_trajectory(initial_jet_state(params), params, 2 * DAY, 0.0, params.dt_step)
    return traj[0]


@pytest.fixture
def covariance_config() -> CovarianceConfig:
    return SMALL_COVARIANCE
