"""
Background error covariance B = b^2 C as a matrix-free operator.

C is separable: a periodic Gaussian correlation in x built from its Fourier spectrum, a Gaussian
correlation between the interior rows in y, and a 2x2 inter-layer factor. Each factor has a
spectral square root, which gives the control-variable transform x = x_b + S chi with S S^T = B.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from qgml.constants import (
    CORRELATION_EIGEN_FLOOR,
    DEFAULT_HORIZ_CORR_LEN,
    DEFAULT_STD_B,
    DEFAULT_VERT_CORR,
)
from qgml.exceptions import GridMismatchError
from qgml.qg import GridSpec

logger = logging.getLogger(__name__)


class CovarianceConfig(BaseModel):
    horiz_corr_len: float = Field(default=DEFAULT_HORIZ_CORR_LEN, gt=0)
    vert_corr: float = Field(default=DEFAULT_VERT_CORR, gt=-1, lt=1)
    std_b: float = Field(default=DEFAULT_STD_B, gt=0)

    model_config = {"extra": "forbid", "frozen": True}


def _zonal_spectrum(grid: GridSpec, length: float) -> np.ndarray:
    """Real-FFT weights of the periodic Gaussian exp(-d^2/length^2), scaled to unit variance."""
    k = 2.0 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
    full = np.exp(-((k * length) ** 2) / 4.0)
    full = np.maximum(full, CORRELATION_EIGEN_FLOOR * full.max())
    full = full / full.mean()
    return full[: grid.nx // 2 + 1]


def _meridional_factors(grid: GridSpec, length: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian row correlation with unit diagonal and its square root (S_y S_y^T = C_y)."""
    y = grid.y_coords()
    corr = np.exp(-((y[:, None] - y[None, :]) ** 2) / length**2)
    eigvals, eigvecs = np.linalg.eigh(corr)
    eigvals = np.maximum(eigvals, CORRELATION_EIGEN_FLOOR * eigvals.max())
    root = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    floored = (eigvecs * eigvals) @ eigvecs.T
    scale = 1.0 / np.sqrt(np.diag(floored))
    return scale[:, None] * floored * scale[None, :], scale[:, None] * root


def _layer_root(c: float) -> np.ndarray:
    plus, minus = np.sqrt(1.0 + c), np.sqrt(1.0 - c)
    return 0.5 * np.array([[plus + minus, plus - minus], [plus - minus, plus + minus]])


@dataclass(frozen=True)
class CovarianceOperator:
    config: CovarianceConfig
    grid: GridSpec
    zonal_weights: np.ndarray
    meridional: np.ndarray
    meridional_root: np.ndarray
    layer_factor: np.ndarray
    layer_root: np.ndarray

    @classmethod
    def build(cls, config: CovarianceConfig, grid: GridSpec) -> CovarianceOperator:
        length = config.horiz_corr_len * grid.lx
        meridional, meridional_root = _meridional_factors(grid, length)
        c = config.vert_corr
        logger.debug(f"Background covariance: length {length:.3g}, c={c}, b={config.std_b}")
        return cls(
            config=config,
            grid=grid,
            zonal_weights=_zonal_spectrum(grid, length),
            meridional=meridional,
            meridional_root=meridional_root,
            layer_factor=np.array([[1.0, c], [c, 1.0]]),
            layer_root=_layer_root(c),
        )

    def _as_field(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.grid.size:
            raise GridMismatchError(f"Vector of size {v.size} does not match grid size {self.grid.size}")
        return v.reshape(self.grid.state_shape)

    def _zonal(self, field: np.ndarray, power: float) -> np.ndarray:
        spectrum = np.fft.rfft(field, axis=-1) * self.zonal_weights**power
        return np.fft.irfft(spectrum, n=self.grid.nx, axis=-1)

    def _separable(self, v: np.ndarray, layer: np.ndarray, rows: np.ndarray, power: float) -> np.ndarray:
        field = self._as_field(v)
        out = np.einsum("lm,ij,mjx->lix", layer, rows, field)
        return self.config.std_b ** (2 * power) * self._zonal(out, power)


def apply_cov(op: CovarianceOperator, v: np.ndarray) -> np.ndarray:
    """B v, returned with the same shape as v."""
    shape = np.shape(v)
    return op._separable(v, op.layer_factor, op.meridional, 1.0).reshape(shape)


def apply_sqrt(op: CovarianceOperator, chi: np.ndarray) -> np.ndarray:
    """S chi as a state-shaped field."""
    return op._separable(chi, op.layer_root, op.meridional_root, 0.5)


def apply_sqrt_transpose(op: CovarianceOperator, v: np.ndarray) -> np.ndarray:
    """S^T v as a flat control vector."""
    return op._separable(v, op.layer_root.T, op.meridional_root.T, 0.5).reshape(-1)
