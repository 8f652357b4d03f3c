"""
Strong-constraint 4D-Var over one-day windows.

The control variable is chi with x_i = x_b + S chi, so the background term is 0.5 |chi|^2. The
observation term runs the (optionally forced) original model through the window and its gradient
comes from one adjoint sweep. L-BFGS from scipy minimizes the cost in chi.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field
from scipy import optimize, sparse
from tqdm import tqdm

from qgml.constants import (
    DEFAULT_GRADIENT_REDUCTION,
    DEFAULT_LBFGS_MEMORY,
    DEFAULT_MAX_ITERATIONS,
    DURATION_RTOL,
    HOUR,
)
from qgml.covariance import CovarianceConfig, CovarianceOperator, apply_sqrt, apply_sqrt_transpose
from qgml.exceptions import ModelBlowUpError, ObservationError
from qgml.observations import ObsBatch, ObsDatabase, observation_matrix
from qgml.qg import (
    ForcingTerm,
    ModelState,
    QgParams,
    Trajectory,
    integrate,
    resolvent,
    step_adjoint,
)
from qgml.utils import whole_steps

logger = logging.getLogger(__name__)

ModelMode = Literal["original", "hybrid", "oracle"]


def _inside_window(offset: float, length: float) -> bool:
    # a batch on the window edge may overshoot the length by rounding
    return 0.0 < offset <= length * (1.0 + DURATION_RTOL)


class DaConfig(BaseModel):
    covariance: CovarianceConfig = Field(default_factory=CovarianceConfig)
    max_iterations: int = Field(default=DEFAULT_MAX_ITERATIONS, ge=1)
    gradient_reduction: float = Field(default=DEFAULT_GRADIENT_REDUCTION, gt=0)
    memory: int = Field(default=DEFAULT_LBFGS_MEMORY, ge=1)
    mode: ModelMode = "original"
    tau_hours: float = Field(default=24.0, gt=0)
    retune_std_b: bool = False

    model_config = {"extra": "forbid", "frozen": True}


@dataclass(frozen=True)
class WindowSpec:
    start_time: float
    length: float
    batch_offsets: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(not _inside_window(off, self.length) for off in self.batch_offsets):
            raise ObservationError("Batch times must lie strictly inside (start, start + length]")

    @classmethod
    def for_batches(cls, start: float, length: float, batches: tuple[ObsBatch, ...]) -> WindowSpec:
        return cls(start, length, tuple(b.time - start for b in batches))


@dataclass(frozen=True)
class AssimilationModel:
    """The model used inside a window: original parameters plus an optional constant forcing."""

    params: QgParams
    forcing: ForcingTerm | None = None


class Correction(Protocol):
    """Model-error estimate accumulated over `tau`, evaluated at a state."""

    tau: float

    def __call__(self, state: ModelState) -> np.ndarray: ...


@dataclass(frozen=True)
class OracleCorrection:
    """Exact error of the original model against the reference model over tau."""

    true_params: QgParams
    original_params: QgParams
    tau: float

    def __call__(self, state: ModelState) -> np.ndarray:
        truth = resolvent(state, self.true_params, self.tau)
        model = resolvent(state, self.original_params, self.tau)
        return truth.psi - model.psi


def forcing_from_correction(correction: Correction, state: ModelState, params: QgParams) -> ForcingTerm:
    """Spread the correction evenly over the steps of tau: eta = (dt / tau) * correction."""
    whole_steps(correction.tau, params.dt_step, "sampling period")
    return ForcingTerm(params.dt_step / correction.tau * correction(state))


class WindowProblem:
    """
    Cost function of one window in control space.

    Parameters:
        background (ModelState): x_b at the window start.
        window (WindowSpec): Start, length and batch offsets.
        batches (tuple[ObsBatch, ...]): Observations inside the window.
        model (AssimilationModel): Original model and optional forcing.
        covariance (CovarianceOperator): B and its square root.
    """

    def __init__(
        self,
        background: ModelState,
        window: WindowSpec,
        batches: tuple[ObsBatch, ...],
        model: AssimilationModel,
        covariance: CovarianceOperator,
    ) -> None:
        grid = model.params.grid
        background.check_grid(grid)
        self.background = background
        self.window = window
        self.model = model
        self.covariance = covariance
        self._by_step: dict[int, list[tuple[sparse.csr_matrix, np.ndarray, float]]] = defaultdict(list)
        for batch in batches:
            offset = batch.time - window.start_time
            if not _inside_window(offset, window.length):
                raise ObservationError(f"Batch at t={batch.time:.6g} outside the window")
            n = whole_steps(offset, model.params.dt_step, "batch offset")
            h = observation_matrix(batch.locations, grid)
            self._by_step[n].append((h, batch.values, batch.obs_var))
        self.n_steps = max(self._by_step, default=0)

    def state(self, chi: np.ndarray) -> ModelState:
        psi = self.background.psi + apply_sqrt(self.covariance, chi)
        return ModelState(psi, self.background.time)

    def _trajectory(self, psi0: np.ndarray) -> list[np.ndarray]:
        _, states = integrate(psi0, self.model.params, self.n_steps, self.model.forcing, keep_every=1)
        return states

    def observation_cost(self, x_i: ModelState) -> float:
        """0.5 * sum_k |H_k M(x_i) - y_k|^2 / obs_var."""
        states = self._trajectory(x_i.psi)
        total = 0.0
        for n, entries in self._by_step.items():
            for h, values, var in entries:
                d = h @ states[n].ravel() - values
                total += 0.5 * float(d @ d) / var
        return total

    def cost_and_gradient(self, chi: np.ndarray) -> tuple[float, np.ndarray]:
        chi = np.asarray(chi, dtype=np.float64)
        states = self._trajectory(self.state(chi).psi)
        params = self.model.params
        injections: dict[int, np.ndarray] = {}
        jo = 0.0
        for n, entries in self._by_step.items():
            lam_n = np.zeros(params.grid.size)
            for h, values, var in entries:
                d = h @ states[n].ravel() - values
                jo += 0.5 * float(d @ d) / var
                lam_n += h.T @ (d / var)
            injections[n] = lam_n.reshape(params.grid.state_shape)

        lam = np.zeros(params.grid.state_shape)
        for n in range(self.n_steps, 0, -1):
            if n in injections:
                lam = lam + injections[n]
            lam = step_adjoint(states[n - 1], lam, params)
        cost = 0.5 * float(chi @ chi) + jo
        return cost, chi + apply_sqrt_transpose(self.covariance, lam)

    def cost(self, chi: np.ndarray) -> float:
        return self.cost_and_gradient(chi)[0]

    def gradient(self, chi: np.ndarray) -> np.ndarray:
        return self.cost_and_gradient(chi)[1]


@dataclass(frozen=True)
class WindowAnalysis:
    analysis: ModelState
    final_cost: float
    background_cost: float
    iterations: int
    converged: bool
    cost_history: tuple[float, ...]


def minimize(problem: WindowProblem, config: DaConfig) -> WindowAnalysis:
    """
    L-BFGS in control space from chi = 0.

    Stops when the gradient has been reduced by `gradient_reduction` (infinity norm) or after
    `max_iterations`. The lowest-cost point evaluated is returned, so the analysis cost never
    exceeds the background cost even when the line search fails.
    """
    size = problem.covariance.grid.size
    best: dict[str, object] = {"cost": np.inf, "chi": np.zeros(size)}
    last: dict[str, object] = {}

    def fun(chi: np.ndarray) -> tuple[float, np.ndarray]:
        key = chi.tobytes()
        if last.get("key") != key:
            last.update(key=key, value=problem.cost_and_gradient(chi))
        cost, grad = last["value"]
        if cost < best["cost"]:
            best.update(cost=cost, chi=chi.copy())
        return cost, grad

    chi0 = np.zeros(size)
    cost0, grad0 = fun(chi0)
    history = [cost0]
    if problem.n_steps == 0 or not np.any(grad0):
        return WindowAnalysis(problem.state(chi0), cost0, cost0, 0, True, tuple(history))

    def record(intermediate_result: optimize.OptimizeResult) -> None:
        history.append(float(intermediate_result.fun))

    result = optimize.minimize(
        fun,
        chi0,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={
            "maxiter": config.max_iterations,
            "maxcor": config.memory,
            "gtol": config.gradient_reduction * float(np.max(np.abs(grad0))),
            "ftol": 1e-15,
        },
    )
    # status 1 is the iteration cap, which is an expected way to stop
    converged = result.status in (0, 1)
    if not converged:
        logger.warning(f"Minimization stopped early ({result.message}); keeping best iterate")
    chi_best = best["chi"]
    return WindowAnalysis(
        analysis=problem.state(chi_best),
        final_cost=float(best["cost"]),
        background_cost=cost0,
        iterations=int(result.nit),
        converged=converged,
        cost_history=tuple(history),
    )


# --- Cycling ---


@dataclass(frozen=True)
class CycleRecord:
    window_index: int
    analysis: ModelState
    background: ModelState
    final_cost: float
    background_cost: float
    iterations: int
    converged: bool = True
    analysis_rmse: float = float("nan")
    background_rmse: float = float("nan")
    increment: np.ndarray | None = field(default=None, compare=False)


@dataclass(frozen=True)
class AnalysisTrajectory:
    records: tuple[CycleRecord, ...]
    window_length: float
    mode: str = "original"

    @property
    def analyses(self) -> Trajectory:
        states = [r.analysis for r in self.records]
        return Trajectory(
            np.stack([s.psi for s in states]), states[0].time, self.window_length, self.mode
        )


def cold_start_background(
    truth_state: ModelState, covariance: CovarianceOperator, rng: np.random.Generator
) -> ModelState:
    """First-ever background: truth plus a draw from N(0, B)."""
    chi = rng.standard_normal(covariance.grid.size)
    return ModelState(truth_state.psi + apply_sqrt(covariance, chi), truth_state.time)


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def cycle(
    obs_db: ObsDatabase,
    params: QgParams,
    config: DaConfig,
    n_windows: int,
    x_b_init: ModelState,
    *,
    correction: Correction | None = None,
    truth: Trajectory | None = None,
    progress: bool = False,
) -> AnalysisTrajectory:
    """
    Cycle 4D-Var over consecutive windows.

    Each window is analysed, then its analysis is forecast over the window length to give the
    next background. With a correction, the per-step forcing of a window is computed once from
    its background and also drives the forecast.

    Parameters:
        obs_db (ObsDatabase): Observations; must cover n_windows.
        params (QgParams): Original model.
        config (DaConfig): Covariance and minimizer settings.
        n_windows (int): Number of windows to cycle.
        x_b_init (ModelState): Background of the first window.
        correction (Correction, optional): Network or oracle correction for the hybrid modes.
        truth (Trajectory, optional): When given, analysis and background RMSE are recorded.

    Returns:
        AnalysisTrajectory: One CycleRecord per window, increments attached.
    """
    if n_windows > obs_db.n_windows:
        raise ObservationError(f"Observations cover {obs_db.n_windows} windows, {n_windows} requested")
    covariance = CovarianceOperator.build(config.covariance, params.grid)
    length = obs_db.window_length
    background = ModelState(x_b_init.psi, obs_db.window_start(0))
    records: list[CycleRecord] = []
    mode = config.mode if correction is not None else "original"
    for w in tqdm(range(n_windows), desc=f"Cycling ({mode})", disable=not progress):
        start = obs_db.window_start(w)
        batches = obs_db.window(w)
        try:
            forcing = None
            if correction is not None:
                forcing = forcing_from_correction(correction, background, params)
            problem = WindowProblem(
                background,
                WindowSpec.for_batches(start, length, batches),
                batches,
                AssimilationModel(params, forcing),
                covariance,
            )
            result = minimize(problem, config)
            forecast = resolvent(result.analysis, params, length, forcing)
        except ModelBlowUpError as e:
            logger.error(f"Model blew up in window {w}")
            raise ModelBlowUpError(e.step_index, window_index=w) from e

        analysis_rmse = background_rmse = float("nan")
        if truth is not None:
            reference = truth[truth.index_of(start)].psi
            analysis_rmse = _rmse(result.analysis.psi, reference)
            background_rmse = _rmse(background.psi, reference)
        logger.debug(
            f"Window {w}: J {result.background_cost:.4g} -> {result.final_cost:.4g} in "
            f"{result.iterations} iterations, analysis RMSE {analysis_rmse:.4g}"
        )
        records.append(
            CycleRecord(
                window_index=w,
                analysis=result.analysis,
                background=background,
                final_cost=result.final_cost,
                background_cost=result.background_cost,
                iterations=result.iterations,
                converged=result.converged,
                analysis_rmse=analysis_rmse,
                background_rmse=background_rmse,
            )
        )
        background = ModelState(forecast.psi, start + length)

    # d x^a_k = x^a_{k+1} - M(x^a_k); the forecast of x^a_k is the background of window k + 1
    for k in range(len(records) - 1):
        nxt = records[k + 1]
        records[k] = replace(records[k], increment=nxt.analysis.psi - nxt.background.psi)
    logger.info(f"Cycled {n_windows} windows in {mode} mode")
    return AnalysisTrajectory(tuple(records), length, mode)


def tau_from_hours(hours: float) -> float:
    return hours * HOUR
