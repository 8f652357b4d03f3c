import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.strategies import floats

from qgml.covariance import (
    CovarianceConfig,
    CovarianceOperator,
    apply_cov,
    apply_sqrt,
    apply_sqrt_transpose,
)
from qgml.exceptions import GridMismatchError
from qgml.qg import GridSpec

from .conftest import SMALL_COVARIANCE, SMALL_GRID


def _dense(op: CovarianceOperator) -> tuple[np.ndarray, np.ndarray]:
    basis = np.eye(SMALL_GRID.size)
    b = np.column_stack([apply_cov(op, e) for e in basis])
    s = np.column_stack([apply_sqrt(op, e).ravel() for e in basis])
    return b, s


def test_sqrt_factorizes_covariance() -> None:
    b, s = _dense(CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID))
    np.testing.assert_allclose(s @ s.T, b, atol=1e-12)
    np.testing.assert_allclose(b, b.T, atol=1e-14)


def test_diagonal_is_background_variance() -> None:
    b, _ = _dense(CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID))
    np.testing.assert_allclose(np.diag(b), SMALL_COVARIANCE.std_b**2, rtol=1e-12)


def test_covariance_is_positive_definite() -> None:
    b, _ = _dense(CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID))
    np.linalg.cholesky(b)


@given(vert_corr=floats(min_value=-0.9, max_value=0.9))
@settings(max_examples=15, deadline=None)
def test_sqrt_factorization_holds_for_any_layer_correlation(vert_corr: float) -> None:
    config = CovarianceConfig(horiz_corr_len=0.15, vert_corr=vert_corr, std_b=0.3)
    b, s = _dense(CovarianceOperator.build(config, SMALL_GRID))
    np.testing.assert_allclose(s @ s.T, b, atol=1e-12)
    # the two layers at the same node correlate by vert_corr
    offset = SMALL_GRID.ny * SMALL_GRID.nx
    assert b[0, offset] == pytest.approx(vert_corr * 0.3**2, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_sqrt_transpose_dot_product(seed: int) -> None:
    op = CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID)
    rng = np.random.default_rng(seed)
    chi = rng.standard_normal(SMALL_GRID.size)
    v = rng.standard_normal(SMALL_GRID.state_shape)
    lhs = float(np.sum(apply_sqrt(op, chi) * v))
    rhs = float(np.dot(chi, apply_sqrt_transpose(op, v)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_correlation_decays_with_distance() -> None:
    b, _ = _dense(CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID))
    row = b[0, : SMALL_GRID.nx]
    assert row[0] > row[1] > row[2]
    assert row[1] == pytest.approx(row[-1])


def test_apply_cov_keeps_input_shape(rng: np.random.Generator) -> None:
    op = CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID)
    assert apply_cov(op, rng.standard_normal(SMALL_GRID.size)).shape == (SMALL_GRID.size,)
    assert apply_cov(op, rng.standard_normal(SMALL_GRID.state_shape)).shape == SMALL_GRID.state_shape
    assert apply_sqrt(op, np.zeros(SMALL_GRID.size)).shape == SMALL_GRID.state_shape
    assert apply_sqrt_transpose(op, np.zeros(SMALL_GRID.state_shape)).shape == (SMALL_GRID.size,)


def test_wrong_vector_size_is_rejected() -> None:
    op = CovarianceOperator.build(SMALL_COVARIANCE, SMALL_GRID)
    with pytest.raises(GridMismatchError):
        apply_cov(op, np.zeros(SMALL_GRID.size + 1))


@pytest.mark.parametrize("vert_corr", [-1.0, 1.0])
def test_layer_correlation_must_be_open_interval(vert_corr: float) -> None:
    with pytest.raises(ValueError):
        CovarianceConfig(vert_corr=vert_corr)


def test_default_config_values() -> None:
    config = CovarianceConfig()
    assert config.horiz_corr_len == 0.6
    assert config.vert_corr == 0.2
    assert config.std_b == 0.08


def test_long_correlations_stay_positive_definite() -> None:
    # the default length is 0.6 lx, where the raw Gaussian factors lose rank in double precision
    op = CovarianceOperator.build(CovarianceConfig(), GridSpec())
    assert op.zonal_weights.min() > 0
    eigvals = np.linalg.eigvalsh(op.meridional)
    assert eigvals.min() > 0
    assert eigvals.max() / eigvals.min() < 1e12
    np.testing.assert_allclose(np.diag(op.meridional), 1.0, rtol=1e-12)
    np.testing.assert_allclose(op.meridional_root @ op.meridional_root.T, op.meridional, atol=1e-12)
