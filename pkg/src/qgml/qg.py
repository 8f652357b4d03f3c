"""
Two-layer quasi-geostrophic channel model.

The state is the stream function psi on an (n_layers, ny, nx) grid, periodic in x with psi = 0
on the two walls. Potential vorticity q lives on (n_layers, ny + 2, nx): the interior rows are
diagnosed from psi, the two wall rows are fixed by beta and the orography and never change.

A time step diagnoses winds, traces first-order departure points, interpolates q bilinearly at
those points and inverts q back to psi. The inversion splits the coupled layers into a barotropic
Poisson mode and a baroclinic Helmholtz mode, each solved exactly with an FFT in x and a
tridiagonal solve in y. The tangent-linear and adjoint steps differentiate every stage of that
chain, including the departure points.
"""

from __future__ import annotations

import functools
import logging
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.linalg import solve_banded
from tqdm import tqdm

from qgml.constants import (
    CORIOLIS_F0,
    DEFAULT_BETA,
    DEFAULT_LX,
    DEFAULT_LY,
    DEFAULT_NX,
    DEFAULT_NY,
    DURATION_RTOL,
    HILL_AMPLITUDE,
    HILL_WIDTH_FRACTION,
    JET_PERTURBATION,
    JET_PERTURBATION_WAVENUMBER,
    JET_SPEEDS,
    JET_WIDTH,
    LENGTH_SCALE_M,
    N_LAYERS,
    PERTURBED_DEPTHS_M,
    PERTURBED_DT_MINUTES,
    PERTURBED_HILL_CENTER,
    REDUCED_GRAVITY,
    REFERENCE_DEPTHS_M,
    REFERENCE_DT_MINUTES,
    REFERENCE_HILL_CENTER,
    TIME_UNIT_SECONDS,
)
from qgml.exceptions import CflViolationError, GridMismatchError, HorizonError, ModelBlowUpError
from qgml.utils import whole_steps

logger = logging.getLogger(__name__)


# --- Configuration models ---


class GridSpec(BaseModel):
    nx: int = Field(default=DEFAULT_NX, ge=4)
    ny: int = Field(default=DEFAULT_NY, ge=4)
    n_layers: int = N_LAYERS
    lx: float = Field(default=DEFAULT_LX, gt=0)
    ly: float = Field(default=DEFAULT_LY, gt=0)

    model_config = {"extra": "forbid", "frozen": True}

    @model_validator(mode="after")
    def _two_layers(self) -> GridSpec:
        if self.n_layers != N_LAYERS:
            raise ValueError(f"n_layers must be {N_LAYERS}, got {self.n_layers}")
        return self

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / (self.ny + 1)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.n_layers, self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.n_layers * self.ny * self.nx

    def x_coords(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    def y_coords(self, *, with_walls: bool = False) -> np.ndarray:
        """Row coordinates; row 0 and row ny + 1 are the walls when `with_walls` is set."""
        rows = np.arange(self.ny + 2) if with_walls else np.arange(1, self.ny + 1)
        return rows * self.dy


class OrographySpec(BaseModel):
    """Gaussian hill under the lower layer, center given in nondimensional coordinates."""

    hill_center: tuple[float, float]
    hill_amplitude: float = HILL_AMPLITUDE
    hill_width: float = Field(gt=0)

    model_config = {"extra": "forbid", "frozen": True}


class QgParams(BaseModel):
    f1: float = Field(gt=0)
    f2: float = Field(gt=0)
    beta: float = DEFAULT_BETA
    dt_step: float = Field(gt=0)
    orography: OrographySpec
    grid: GridSpec = Field(default_factory=GridSpec)

    model_config = {"extra": "forbid", "frozen": True}

    @classmethod
    def from_depths(
        cls,
        depths_m: tuple[float, float],
        dt_minutes: float,
        hill_center_fraction: tuple[float, float],
        *,
        grid: GridSpec | None = None,
        beta: float = DEFAULT_BETA,
        hill_amplitude: float = HILL_AMPLITUDE,
        hill_width_fraction: float = HILL_WIDTH_FRACTION,
    ) -> QgParams:
        """
        Build parameters from dimensional layer depths and time step.

        The coupling coefficients are F_i = f0^2 L^2 / (g' D_i), so f1/f2 = D2/D1 holds exactly.

        Parameters:
            depths_m (tuple[float, float]): Upper and lower layer depths in metres.
            dt_minutes (float): Integration step in minutes.
            hill_center_fraction (tuple[float, float]): Hill center as fractions of (lx, ly).
            grid (GridSpec, optional): Grid, defaults to the 40x20x2 channel.

        Returns:
            QgParams: The nondimensional configuration.
        """
        grid = grid or GridSpec()
        scale = (CORIOLIS_F0 * LENGTH_SCALE_M) ** 2 / REDUCED_GRAVITY
        d1, d2 = depths_m
        return cls(
            f1=scale / d1,
            f2=scale / d2,
            beta=beta,
            dt_step=dt_minutes * 60.0 / TIME_UNIT_SECONDS,
            orography=OrographySpec(
                hill_center=(
                    hill_center_fraction[0] * grid.lx,
                    hill_center_fraction[1] * grid.ly,
                ),
                hill_amplitude=hill_amplitude,
                hill_width=hill_width_fraction * grid.lx,
            ),
            grid=grid,
        )


def reference_params(grid: GridSpec | None = None, **overrides: float) -> QgParams:
    """The true model: 6000/4000 m layers, 10 min step, hill in the north-west quarter."""
    return QgParams.from_depths(
        REFERENCE_DEPTHS_M, REFERENCE_DT_MINUTES, REFERENCE_HILL_CENTER, grid=grid, **overrides
    )


def perturbed_params(grid: GridSpec | None = None, **overrides: float) -> QgParams:
    """The original (imperfect) model: 5750/4250 m layers, 20 min step, centered hill."""
    return QgParams.from_depths(
        PERTURBED_DEPTHS_M, PERTURBED_DT_MINUTES, PERTURBED_HILL_CENTER, grid=grid, **overrides
    )


# --- State containers ---


def _frozen_array(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ModelState:
    psi: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", _frozen_array(self.psi))
        if self.psi.ndim != 3:
            raise GridMismatchError(f"psi must be (layers, ny, nx), got shape {self.psi.shape}")

    @property
    def vector(self) -> np.ndarray:
        return self.psi.reshape(-1)

    def check_grid(self, grid: GridSpec) -> None:
        if self.psi.shape != grid.state_shape:
            raise GridMismatchError(
                f"State shape {self.psi.shape} does not match grid {grid.state_shape}"
            )


@dataclass(frozen=True)
class VorticityField:
    q: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", _frozen_array(self.q))


@dataclass(frozen=True)
class ForcingTerm:
    """Increment added to psi after every integration step."""

    eta: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "eta", _frozen_array(self.eta))
        if not np.isfinite(self.eta).all():
            raise ValueError("Forcing must be finite")


@dataclass(frozen=True)
class OrographyField:
    values: np.ndarray
    spec: OrographySpec


@dataclass(frozen=True)
class Trajectory:
    """Uniformly spaced states; `psi` has shape (n_states, layers, ny, nx)."""

    psi: np.ndarray
    t0: float
    dt_between: float
    source_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", _frozen_array(self.psi))
        if self.psi.ndim != 4 or self.psi.shape[0] == 0:
            raise GridMismatchError(f"Trajectory must be (n, layers, ny, nx), got {self.psi.shape}")
        if len(self.psi) > 1 and self.dt_between <= 0:
            raise ValueError("Trajectory spacing must be positive")

    def __len__(self) -> int:
        return len(self.psi)

    def __getitem__(self, index: int) -> ModelState:
        index = range(len(self))[index]
        return ModelState(self.psi[index], self.t0 + index * self.dt_between)

    def __iter__(self) -> Iterator[ModelState]:
        return (self[i] for i in range(len(self)))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * self.dt_between

    @property
    def t_end(self) -> float:
        return self.t0 + (len(self) - 1) * self.dt_between

    def index_of(self, time: float) -> int:
        """Index of the stored state at `time`; the time must fall on the stored spacing."""
        if len(self) == 1:
            if abs(time - self.t0) > DURATION_RTOL * max(1.0, abs(time)):
                raise HorizonError(f"Time {time:.6g} not stored (single state at {self.t0:.6g})")
            return 0
        k = whole_steps(time - self.t0, self.dt_between, "offset")
        if k >= len(self):
            raise HorizonError(f"Time {time:.6g} beyond trajectory end {self.t_end:.6g}")
        return k

    @classmethod
    def from_states(cls, states: list[ModelState], source_id: str = "") -> Trajectory:
        times = np.array([s.time for s in states])
        spacing = float(times[1] - times[0]) if len(states) > 1 else 0.0
        if len(states) > 2 and not np.allclose(np.diff(times), spacing, rtol=1e-9, atol=1e-12):
            raise ValueError("States are not uniformly spaced in time")
        return cls(np.stack([s.psi for s in states]), float(times[0]), spacing, source_id)


# --- Cached operators ---


@dataclass(frozen=True)
class _ChannelOperators:
    grid: GridSpec
    f1: float
    f2: float
    dt: float
    q_background: np.ndarray  # (layers, ny + 2, nx), q of the rest state
    green: np.ndarray  # (modes, nx // 2 + 1, ny, ny)
    to_modes: np.ndarray  # (modes, layers)
    from_modes: np.ndarray  # (layers, modes)

    @property
    def coupling(self) -> np.ndarray:
        return np.array([[-self.f1, self.f1], [self.f2, -self.f2]])


def _hill(spec: OrographySpec, grid: GridSpec) -> np.ndarray:
    """Gaussian hill on every row including the walls; x distance taken periodically."""
    x0, y0 = spec.hill_center
    dx_ = grid.x_coords() - x0
    dx_ = dx_ - grid.lx * np.round(dx_ / grid.lx)
    dy_ = grid.y_coords(with_walls=True) - y0
    r2 = dy_[:, None] ** 2 + dx_[None, :] ** 2
    return spec.hill_amplitude * np.exp(-r2 / (2.0 * spec.hill_width**2))


@functools.lru_cache(maxsize=32)
def _green_matrices(grid: GridSpec, kappa: float) -> np.ndarray:
    """Inverse of (Laplacian - kappa) for every x wavenumber, via banded solves in y."""
    ny, nx = grid.ny, grid.nx
    k = np.arange(nx // 2 + 1)
    symbol_x = (2.0 * np.cos(2.0 * np.pi * k / nx) - 2.0) / grid.dx**2
    off = 1.0 / grid.dy**2
    identity = np.eye(ny)
    green = np.empty((len(k), ny, ny))
    for idx, sx in enumerate(symbol_x):
        banded = np.zeros((3, ny))
        banded[0, 1:] = off
        banded[1, :] = -2.0 * off + sx - kappa
        banded[2, :-1] = off
        green[idx] = solve_banded((1, 1), banded, identity)
    green.flags.writeable = False
    return green


@functools.lru_cache(maxsize=16)
def _operators(params: QgParams) -> _ChannelOperators:
    grid = params.grid
    f1, f2 = params.f1, params.f2
    y = grid.y_coords(with_walls=True)
    q_background = np.broadcast_to(params.beta * y[None, :, None], (2, grid.ny + 2, grid.nx)).copy()
    q_background[1] += _hill(params.orography, grid)
    q_background.flags.writeable = False
    green = np.stack([_green_matrices(grid, 0.0), _green_matrices(grid, f1 + f2)])
    to_modes = np.array([[f2, f1], [1.0, -1.0]]) / (f1 + f2)
    from_modes = np.array([[1.0, f1], [1.0, -f2]])
    return _ChannelOperators(grid, f1, f2, params.dt_step, q_background, green, to_modes, from_modes)


def orography_field(params: QgParams) -> OrographyField:
    return OrographyField(_hill(params.orography, params.grid)[1:-1], params.orography)


# --- Elliptic pieces ---


def laplacian(psi: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Five-point Laplacian, periodic in x, psi = 0 on the walls."""
    padded = np.pad(psi, [(0, 0)] * (psi.ndim - 2) + [(1, 1), (0, 0)])
    d2x = (np.roll(psi, -1, axis=-1) - 2.0 * psi + np.roll(psi, 1, axis=-1)) / grid.dx**2
    d2y = (padded[..., 2:, :] - 2.0 * psi + padded[..., :-2, :]) / grid.dy**2
    return d2x + d2y


def _linear_pv(psi: np.ndarray, ops: _ChannelOperators, *, transpose: bool = False) -> np.ndarray:
    coupling = ops.coupling.T if transpose else ops.coupling
    return laplacian(psi, ops.grid) + np.einsum("lm,myx->lyx", coupling, psi)


def _apply_green(rhs: np.ndarray, green: np.ndarray, nx: int) -> np.ndarray:
    spectrum = np.fft.rfft(rhs, axis=-1)
    solved = np.einsum("...kij,...jk->...ik", green, spectrum)
    return np.fft.irfft(solved, n=nx, axis=-1)


def solve_helmholtz(rhs: np.ndarray, kappa: float, grid: GridSpec) -> np.ndarray:
    """Solve (Laplacian - kappa) psi = rhs with psi = 0 on the walls; rhs is (..., ny, nx)."""
    return _apply_green(rhs, _green_matrices(grid, float(kappa)), grid.nx)


def _invert(r: np.ndarray, ops: _ChannelOperators) -> np.ndarray:
    modes = np.einsum("ml,lyx->myx", ops.to_modes, r)
    return np.einsum("lm,myx->lyx", ops.from_modes, _apply_green(modes, ops.green, ops.grid.nx))


def _invert_transpose(lam: np.ndarray, ops: _ChannelOperators) -> np.ndarray:
    modes = np.einsum("ml,lyx->myx", ops.from_modes.T, lam)
    return np.einsum("lm,myx->lyx", ops.to_modes.T, _apply_green(modes, ops.green, ops.grid.nx))


def _full_pv(psi: np.ndarray, ops: _ChannelOperators) -> np.ndarray:
    q = ops.q_background.copy()
    q[:, 1:-1] += _linear_pv(psi, ops)
    return q


def psi_to_q(state: ModelState, params: QgParams) -> VorticityField:
    state.check_grid(params.grid)
    return VorticityField(_full_pv(state.psi, _operators(params)))


def q_to_psi(q: VorticityField, params: QgParams, time: float = 0.0) -> ModelState:
    """
    Invert potential vorticity to stream function.

    Only the interior rows of q are used; the wall rows are the fixed background. With psi = 0 on
    both walls the barotropic Poisson problem is nonsingular, so no gauge needs fixing.
    """
    grid = params.grid
    expected = (grid.n_layers, grid.ny + 2, grid.nx)
    if q.q.shape != expected:
        raise GridMismatchError(f"Vorticity shape {q.q.shape} does not match {expected}")
    if not np.isfinite(q.q).all():
        raise ValueError("Vorticity field is not finite")
    ops = _operators(params)
    return ModelState(_invert(q.q[:, 1:-1] - ops.q_background[:, 1:-1], ops), time)


# --- Advection ---


def winds(psi: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Centered-difference winds u = -dpsi/dy, v = dpsi/dx on the interior rows."""
    padded = np.pad(psi, [(0, 0)] * (psi.ndim - 2) + [(1, 1), (0, 0)])
    u = -(padded[..., 2:, :] - padded[..., :-2, :]) / (2.0 * grid.dy)
    v = (np.roll(psi, -1, axis=-1) - np.roll(psi, 1, axis=-1)) / (2.0 * grid.dx)
    return u, v


def _winds_transpose(lam_u: np.ndarray, lam_v: np.ndarray, grid: GridSpec) -> np.ndarray:
    # both difference operators are antisymmetric
    u_part, _ = winds(lam_u, grid)
    _, v_part = winds(lam_v, grid)
    return -u_part - v_part


@dataclass(frozen=True)
class _Departure:
    """Bilinear stencil of the departure points in wall-inclusive grid index space."""

    layer: np.ndarray
    j0: np.ndarray
    i0: np.ndarray
    i1: np.ndarray
    a: np.ndarray
    b: np.ndarray
    inside: np.ndarray

    @property
    def j1(self) -> np.ndarray:
        return self.j0 + 1


def _departure(u: np.ndarray, v: np.ndarray, grid: GridSpec, dt: float) -> _Departure:
    shift_x = dt * u
    shift_y = dt * v
    worst_x = float(np.max(np.abs(shift_x)))
    worst_y = float(np.max(np.abs(shift_y)))
    if worst_x >= grid.lx or worst_y >= grid.ly:
        raise CflViolationError(
            f"Departure displacement ({worst_x:.3g}, {worst_y:.3g}) exceeds the domain "
            f"({grid.lx:.3g}, {grid.ly:.3g}); reduce dt_step"
        )
    n_layers, ny, nx = u.shape
    gx = np.arange(nx)[None, None, :] - shift_x / grid.dx
    gy = np.arange(1, ny + 1)[None, :, None] - shift_y / grid.dy
    inside = (gy > 0.0) & (gy < ny + 1)
    gy = np.clip(gy, 0.0, ny + 1)
    fx = np.floor(gx)
    i0 = fx.astype(np.int64) % nx
    fy = np.minimum(np.floor(gy), ny)
    layer = np.broadcast_to(np.arange(n_layers)[:, None, None], u.shape)
    return _Departure(
        layer=layer,
        j0=fy.astype(np.int64),
        i0=i0,
        i1=(i0 + 1) % nx,
        a=gx - fx,
        b=gy - fy,
        inside=inside,
    )


def _corners(field_ext: np.ndarray, dep: _Departure) -> tuple[np.ndarray, ...]:
    return (
        field_ext[dep.layer, dep.j0, dep.i0],
        field_ext[dep.layer, dep.j0, dep.i1],
        field_ext[dep.layer, dep.j1, dep.i0],
        field_ext[dep.layer, dep.j1, dep.i1],
    )


def _weights(dep: _Departure) -> tuple[np.ndarray, ...]:
    a, b = dep.a, dep.b
    return ((1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b)


def _interpolate(field_ext: np.ndarray, dep: _Departure) -> np.ndarray:
    return sum(w * c for w, c in zip(_weights(dep), _corners(field_ext, dep), strict=True))


def _interpolate_transpose(values: np.ndarray, dep: _Departure, shape: tuple[int, ...]) -> np.ndarray:
    n_rows, nx = shape[1], shape[2]
    out = np.zeros(int(np.prod(shape)))
    for w, (j, i) in zip(
        _weights(dep),
        [(dep.j0, dep.i0), (dep.j0, dep.i1), (dep.j1, dep.i0), (dep.j1, dep.i1)],
        strict=True,
    ):
        flat = (dep.layer * n_rows + j) * nx + i
        out += np.bincount(flat.ravel(), weights=(w * values).ravel(), minlength=out.size)
    return out.reshape(shape)


def _slopes(field_ext: np.ndarray, dep: _Departure) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the bilinear interpolant w.r.t. the fractional offsets a and b."""
    c00, c01, c10, c11 = _corners(field_ext, dep)
    a, b = dep.a, dep.b
    return (1 - b) * (c01 - c00) + b * (c11 - c10), (1 - a) * (c10 - c00) + a * (c11 - c01)


def semi_lagrangian_advect(
    q_ext: np.ndarray, u: np.ndarray, v: np.ndarray, grid: GridSpec, dt: float
) -> np.ndarray:
    """Interior q at the arrival points: q_ext interpolated at arrival - dt * (u, v)."""
    return _interpolate(q_ext, _departure(u, v, grid, dt))


# --- Time stepping ---


def _step_psi(psi: np.ndarray, ops: _ChannelOperators, eta: np.ndarray | None) -> np.ndarray:
    q_ext = _full_pv(psi, ops)
    u, v = winds(psi, ops.grid)
    q_arrival = _interpolate(q_ext, _departure(u, v, ops.grid, ops.dt))
    psi_next = _invert(q_arrival - ops.q_background[:, 1:-1], ops)
    if eta is not None:
        psi_next = psi_next + eta
    return psi_next


def _forcing_array(forcing: ForcingTerm | None, grid: GridSpec) -> np.ndarray | None:
    if forcing is None:
        return None
    if forcing.eta.shape != grid.state_shape:
        raise GridMismatchError(f"Forcing shape {forcing.eta.shape} does not match {grid.state_shape}")
    return forcing.eta


def step(state: ModelState, params: QgParams, forcing: ForcingTerm | None = None) -> ModelState:
    state.check_grid(params.grid)
    if not np.isfinite(state.psi).all():
        raise ModelBlowUpError(0)
    psi = _step_psi(state.psi, _operators(params), _forcing_array(forcing, params.grid))
    if not np.isfinite(psi).all():
        raise ModelBlowUpError(1)
    return ModelState(psi, state.time + params.dt_step)


def integrate(
    psi: np.ndarray,
    params: QgParams,
    n_steps: int,
    forcing: ForcingTerm | None = None,
    *,
    keep_every: int = 0,
    progress: bool = False,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """
    Advance a raw psi array by n_steps.

    Parameters:
        psi (np.ndarray): Initial stream function.
        params (QgParams): Model configuration.
        n_steps (int): Number of steps.
        forcing (ForcingTerm, optional): Per-step increment.
        keep_every (int): When positive, every keep_every-th state (including the first) is kept.
        progress (bool): Show a tqdm bar.

    Returns:
        tuple: Final psi and the list of kept states.
    """
    ops = _operators(params)
    eta = _forcing_array(forcing, params.grid)
    if not np.isfinite(psi).all():
        raise ModelBlowUpError(0)
    kept = [psi] if keep_every > 0 else []
    for k in tqdm(range(n_steps), desc="Integrating", disable=not progress, leave=False):
        psi = _step_psi(psi, ops, eta)
        if not np.isfinite(psi).all():
            raise ModelBlowUpError(k + 1)
        if keep_every > 0 and (k + 1) % keep_every == 0:
            kept.append(psi)
    return psi, kept


def resolvent(
    state: ModelState,
    params: QgParams,
    horizon: float,
    forcing: ForcingTerm | None = None,
) -> ModelState:
    state.check_grid(params.grid)
    n_steps = whole_steps(horizon, params.dt_step, "horizon")
    psi, _ = integrate(state.psi, params, n_steps, forcing)
    return ModelState(psi, state.time + n_steps * params.dt_step)


def step_history(
    state: ModelState, params: QgParams, n_steps: int, forcing: ForcingTerm | None = None
) -> Trajectory:
    """Every intermediate state of an n_steps integration: the linearization trajectory."""
    state.check_grid(params.grid)
    _, kept = integrate(state.psi, params, n_steps, forcing, keep_every=1)
    return Trajectory(np.stack(kept), state.time, params.dt_step)


def generate_trajectory(
    init: ModelState,
    params: QgParams,
    spinup: float,
    length: float,
    store_every: float,
    forcing: ForcingTerm | None = None,
    *,
    progress: bool = False,
) -> Trajectory:
    init.check_grid(params.grid)
    n_spin = whole_steps(spinup, params.dt_step, "spin-up")
    n_length = whole_steps(length, params.dt_step, "length")
    if n_length == 0:
        psi, _ = integrate(init.psi, params, n_spin, forcing, progress=progress)
        return Trajectory(psi[None], init.time + n_spin * params.dt_step, store_every)
    n_every = whole_steps(store_every, params.dt_step, "storage period")
    if n_every == 0 or n_length % n_every:
        raise HorizonError(f"Length {length:.6g} is not a multiple of storage period {store_every:.6g}")
    logger.debug(f"Spin-up {n_spin} steps, then {n_length} steps stored every {n_every}")
    psi, _ = integrate(init.psi, params, n_spin, forcing, progress=progress)
    try:
        _, kept = integrate(psi, params, n_length, forcing, keep_every=n_every, progress=progress)
    except ModelBlowUpError as e:
        raise ModelBlowUpError(n_spin + e.step_index) from e
    return Trajectory(
        np.stack(kept), init.time + n_spin * params.dt_step, n_every * params.dt_step
    )


def initial_jet_state(
    params: QgParams,
    *,
    speeds: tuple[float, float] = JET_SPEEDS,
    width: float = JET_WIDTH,
    perturbation: float = JET_PERTURBATION,
    wavenumber: int = JET_PERTURBATION_WAVENUMBER,
) -> ModelState:
    """Eastward tanh jet in both layers, corrected to vanish on the walls, plus a wave."""
    grid = params.grid
    y = grid.y_coords()
    x = grid.x_coords()
    center = grid.ly / 2.0
    profile = np.tanh((y - center) / width) - np.tanh(center / width) * (2.0 * y / grid.ly - 1.0)
    wave = perturbation * np.sin(2.0 * np.pi * wavenumber * x / grid.lx)[None, :] * np.sin(
        np.pi * y / grid.ly
    )[:, None]
    psi = np.stack([-speed * width * profile[:, None] + wave for speed in speeds])
    return ModelState(psi, 0.0)


# --- Tangent linear and adjoint ---


def step_tangent_linear(psi: np.ndarray, dpsi: np.ndarray, params: QgParams) -> np.ndarray:
    """Derivative of one unforced step at psi applied to dpsi."""
    ops = _operators(params)
    grid = ops.grid
    q_ext = _full_pv(psi, ops)
    dep = _departure(*winds(psi, grid), grid, ops.dt)
    slope_a, slope_b = _slopes(q_ext, dep)

    dq_ext = np.zeros_like(q_ext)
    dq_ext[:, 1:-1] = _linear_pv(dpsi, ops)
    du, dv = winds(dpsi, grid)
    da = -ops.dt * du / grid.dx
    db = np.where(dep.inside, -ops.dt * dv / grid.dy, 0.0)
    dq_arrival = _interpolate(dq_ext, dep) + slope_a * da + slope_b * db
    return _invert(dq_arrival, ops)


def step_adjoint(psi: np.ndarray, lam: np.ndarray, params: QgParams) -> np.ndarray:
    """Transpose of step_tangent_linear at psi applied to the costate lam."""
    ops = _operators(params)
    grid = ops.grid
    q_ext = _full_pv(psi, ops)
    dep = _departure(*winds(psi, grid), grid, ops.dt)
    slope_a, slope_b = _slopes(q_ext, dep)

    lam_q = _invert_transpose(lam, ops)
    lam_u = -ops.dt / grid.dx * (lam_q * slope_a)
    lam_v = np.where(dep.inside, -ops.dt / grid.dy * (lam_q * slope_b), 0.0)
    lam_q_ext = _interpolate_transpose(lam_q, dep, q_ext.shape)
    # wall rows of q are fixed, their costate is dropped
    return _linear_pv(lam_q_ext[:, 1:-1], ops, transpose=True) + _winds_transpose(
        lam_u, lam_v, grid
    )


def _check_linearization(base_traj: Trajectory, params: QgParams) -> None:
    if base_traj.psi.shape[1:] != params.grid.state_shape:
        raise GridMismatchError(
            f"Trajectory states {base_traj.psi.shape[1:]} do not match {params.grid.state_shape}"
        )
    if len(base_traj) > 1 and not np.isclose(
        base_traj.dt_between, params.dt_step, rtol=DURATION_RTOL, atol=0.0
    ):
        raise HorizonError(
            f"Linearization trajectory spacing {base_traj.dt_between:.6g} is not the model step "
            f"{params.dt_step:.6g}"
        )


def tangent_linear(base_traj: Trajectory, delta: ModelState, params: QgParams) -> ModelState:
    """Propagate a perturbation along every step of base_traj (its last state is not used)."""
    _check_linearization(base_traj, params)
    delta.check_grid(params.grid)
    dpsi = delta.psi
    for k in range(len(base_traj) - 1):
        dpsi = step_tangent_linear(base_traj.psi[k], dpsi, params)
    return ModelState(dpsi, base_traj.t_end)


def adjoint(base_traj: Trajectory, costate: ModelState, params: QgParams) -> ModelState:
    _check_linearization(base_traj, params)
    costate.check_grid(params.grid)
    lam = costate.psi
    for k in reversed(range(len(base_traj) - 1)):
        lam = step_adjoint(base_traj.psi[k], lam, params)
    return ModelState(lam, base_traj.t0)
