"""
Metrics and experiment drivers.

Forecast skill compares a test model with the true model from a set of initial states. The other
drivers measure the climatology, the error doubling time and the normalized MSE of a trained
corrector, and run the architecture sweep over sampling periods and database sizes.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from qgml.constants import (
    CLIMATOLOGY_MIN_SPAN_DAYS,
    DAY,
    DOUBLING_MIN_POINTS,
    DOUBLING_R2_THRESHOLD,
    PERTURBATION_FRACTION,
    SELECTION_LEAD_DAYS,
    SPINUP_WINDOWS,
)
from qgml.dataset import (
    DatasetConfig,
    TrainingDatabase,
    build_database,
    build_full_database,
    compute_normalizer,
    max_samples,
)
from qgml.exceptions import (
    DatasetTooShortError,
    GridMismatchError,
    HorizonError,
    NoExponentialRegimeError,
    QgmlError,
    TrainingDivergedError,
    ZeroVarianceError,
)
from qgml.neural import (
    NetworkCorrection,
    NetworkParams,
    NetworkSpec,
    Normalizer,
    TrainConfig,
    TrainResult,
    forward,
    train,
)
from qgml.qg import ModelState, QgParams, Trajectory, integrate, resolvent
from qgml.utils import whole_steps, worker_count
from qgml.var4d import OracleCorrection

logger = logging.getLogger(__name__)


def _psi(x: ModelState | np.ndarray) -> np.ndarray:
    return x.psi if isinstance(x, ModelState) else np.asarray(x, dtype=np.float64)


def rmse(a: ModelState | np.ndarray, b: ModelState | np.ndarray) -> float:
    pa, pb = _psi(a), _psi(b)
    if pa.shape != pb.shape:
        raise GridMismatchError(f"Cannot compare shapes {pa.shape} and {pb.shape}")
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


# --- Forecasters ---


class Forecaster(Protocol):
    name: str

    @property
    def granularity(self) -> float: ...

    def advance(self, state: ModelState, horizon: float) -> ModelState: ...


@dataclass(frozen=True)
class ModelForecaster:
    """Plain integration of one model setup."""

    params: QgParams
    name: str = "model"

    @property
    def granularity(self) -> float:
        return self.params.dt_step

    def advance(self, state: ModelState, horizon: float) -> ModelState:
        return resolvent(state, self.params, horizon)


@dataclass(frozen=True)
class HybridForecaster:
    """Original model plus the network correction, applied once per sampling period."""

    params: QgParams
    correction: NetworkCorrection
    name: str = "hybrid"

    @property
    def granularity(self) -> float:
        return self.correction.tau

    def advance(self, state: ModelState, horizon: float) -> ModelState:
        tau = self.correction.tau
        for _ in range(whole_steps(horizon, tau, "lead")):
            base = resolvent(state, self.params, tau)
            state = ModelState(base.psi + self.correction(state), base.time)
        return state


@dataclass(frozen=True)
class SurrogateForecaster:
    """The network alone, trained to predict the state one sampling period ahead."""

    correction: NetworkCorrection
    name: str = "surrogate"

    @property
    def granularity(self) -> float:
        return self.correction.tau

    def advance(self, state: ModelState, horizon: float) -> ModelState:
        tau = self.correction.tau
        for _ in range(whole_steps(horizon, tau, "lead")):
            state = ModelState(self.correction(state), state.time + tau)
        return state


# --- Forecast skill ---


@dataclass(frozen=True)
class SkillCurve:
    lead_days: np.ndarray
    fs: np.ndarray
    n_members: int
    true_model: str
    test_model: str


def _member_errors(
    true_model: Forecaster, test_model: Forecaster, init: ModelState, leads: np.ndarray
) -> np.ndarray:
    truth, test = init, init
    errors = np.empty(len(leads))
    elapsed = 0.0
    for k, lead in enumerate(leads):
        if lead > elapsed:
            truth = true_model.advance(truth, lead - elapsed)
            test = test_model.advance(test, lead - elapsed)
            elapsed = lead
        errors[k] = rmse(truth, test)
    return errors


def forecast_skill(
    true_model: Forecaster,
    test_model: Forecaster,
    inits: Sequence[ModelState],
    leads_days: Sequence[float],
    *,
    n_jobs: int | None = None,
) -> SkillCurve:
    """
    Ensemble-mean RMSE between the two models' forecasts at every lead.

    Leads must be increasing and on both models' granularity. Members run in parallel and are
    reduced in index order.
    """
    leads = np.asarray(leads_days, dtype=np.float64) * DAY
    if len(leads) == 0 or np.any(np.diff(leads) <= 0) or leads[0] < 0:
        raise ValueError("Lead times must be non-negative and strictly increasing")
    if not inits:
        raise ValueError("Forecast skill needs at least one initial state")
    for model in (true_model, test_model):
        for lead in np.diff(np.concatenate([[0.0], leads])):
            whole_steps(lead, model.granularity, f"lead for {model.name}")
    errors = Parallel(n_jobs=worker_count(n_jobs))(
        delayed(_member_errors)(true_model, test_model, init, leads) for init in inits
    )
    return SkillCurve(
        lead_days=np.asarray(leads_days, dtype=np.float64),
        fs=np.mean(np.stack(errors), axis=0),
        n_members=len(inits),
        true_model=true_model.name,
        test_model=test_model.name,
    )


def model_error(
    state: ModelState, true_params: QgParams, original_params: QgParams, horizon: float
) -> np.ndarray:
    """Difference between the true and original forecasts of `state` over `horizon`."""
    return OracleCorrection(true_params, original_params, horizon)(state)


def initial_states(trajs: Sequence[Trajectory], count: int, spacing: float) -> list[ModelState]:
    """
    `count` states spread evenly over the window starts of the given truth trajectories.

    Candidates are the states at whole multiples of `spacing`; the pick is deterministic.
    """
    candidates: list[ModelState] = []
    for traj in trajs:
        stride = whole_steps(spacing, traj.dt_between, "initial-state spacing") if len(traj) > 1 else 1
        candidates += [traj[i] for i in range(0, len(traj), stride)]
    if len(candidates) < count:
        raise HorizonError(f"Only {len(candidates)} candidate initial states for {count} members")
    picks = np.linspace(0, len(candidates) - 1, count).round().astype(int)
    return [candidates[i] for i in picks]


# --- Climatology and error growth ---


@dataclass(frozen=True)
class Climatology:
    mean: np.ndarray
    std: np.ndarray

    @property
    def variability(self) -> float:
        return float(np.mean(self.std))


def climatology(traj: Trajectory, *, min_span_days: float = CLIMATOLOGY_MIN_SPAN_DAYS) -> Climatology:
    span = traj.t_end - traj.t0
    if span < min_span_days * DAY * (1 - 1e-9):
        raise HorizonError(
            f"Trajectory spans {span / DAY:.1f} days, climatology needs {min_span_days:g}"
        )
    return Climatology(np.mean(traj.psi, axis=0), np.std(traj.psi, axis=0))


def pooled_climatology(trajs: Sequence[Trajectory]) -> Climatology:
    """Climatology of several segments of one run, weighted by their number of states."""
    psi = np.concatenate([t.psi for t in trajs])
    return Climatology(np.mean(psi, axis=0), np.std(psi, axis=0))


def variability_mismatch(member: Trajectory, reference: Climatology) -> float:
    """Relative difference between a member's variability and the reference variability."""
    if reference.variability == 0.0:
        raise ZeroVarianceError("Reference climatology has zero variability")
    own = float(np.mean(np.std(member.psi, axis=0)))
    return abs(own - reference.variability) / reference.variability


def fit_doubling_time(
    times: np.ndarray,
    errors: np.ndarray,
    *,
    r2_threshold: float = DOUBLING_R2_THRESHOLD,
    min_points: int = DOUBLING_MIN_POINTS,
) -> float:
    """
    ln 2 / growth rate of the longest contiguous segment whose log-error fit has R^2 >= threshold.

    Among segments of equal length the earliest wins. Only positive growth rates qualify.
    """
    times = np.asarray(times, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    positive = errors > 0
    if positive.sum() < min_points:
        raise NoExponentialRegimeError("Error series has no growth to fit")
    n = len(errors)
    for length in range(n, min_points - 1, -1):
        for start in range(n - length + 1):
            seg = slice(start, start + length)
            if not positive[seg].all():
                continue
            fit = stats.linregress(times[seg], np.log(errors[seg]))
            if fit.slope > 0 and fit.rvalue**2 >= r2_threshold:
                return math.log(2.0) / fit.slope
    raise NoExponentialRegimeError(f"No segment of {min_points}+ points reaches R^2 {r2_threshold}")


def doubling_time(
    params: QgParams,
    base_state: ModelState,
    variability: float,
    *,
    horizon_days: float = 40.0,
    sample_hours: float = 12.0,
    seed: int = 0,
    perturbation_fraction: float = PERTURBATION_FRACTION,
) -> float:
    """
    Doubling time of small errors, in nondimensional time.

    A random perturbation with RMS perturbation_fraction * variability is added to base_state and
    the pair is integrated over horizon_days; the RMSE series is then passed to fit_doubling_time.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(base_state.psi.shape)
    noise *= perturbation_fraction * variability / np.sqrt(np.mean(noise**2))
    sample = sample_hours * DAY / 24.0
    n_every = whole_steps(sample, params.dt_step, "sampling interval")
    n_total = whole_steps(horizon_days * DAY, sample, "horizon") * n_every
    _, control = integrate(base_state.psi, params, n_total, keep_every=n_every)
    _, perturbed = integrate(base_state.psi + noise, params, n_total, keep_every=n_every)
    errors = np.array([rmse(a, b) for a, b in zip(control, perturbed, strict=True)])
    times = np.arange(len(errors)) * sample
    return fit_doubling_time(times, errors)


# --- Corrector scores ---


def _predict_batch(
    spec: NetworkSpec, params: NetworkParams, normalizer: Normalizer, inputs: np.ndarray
) -> np.ndarray:
    return normalizer.denormalize_output(forward(spec, params, normalizer.normalize_input(inputs)))


def normalized_mse(
    spec: NetworkSpec, params: NetworkParams, normalizer: Normalizer, db: TrainingDatabase
) -> float:
    """MSE of the predictions divided by the variance of the targets."""
    if len(db) == 0:
        raise ValueError("Empty database")
    variance = float(np.var(db.targets))
    if variance == 0.0:
        raise ZeroVarianceError(f"Targets of '{db.source_id}' have zero variance")
    predictions = _predict_batch(spec, params, normalizer, db.inputs)
    return float(np.mean((predictions - db.targets) ** 2)) / variance


def mean_normalized_mse(
    spec: NetworkSpec,
    params: NetworkParams,
    normalizer: Normalizer,
    dbs: Sequence[TrainingDatabase],
) -> tuple[float, float]:
    """Mean and std of normalized_mse over test databases."""
    scores = np.array([normalized_mse(spec, params, normalizer, db) for db in dbs])
    return float(scores.mean()), float(scores.std())


def analysis_rmse(
    analyses: Trajectory, truth: Trajectory, spinup: int = SPINUP_WINDOWS
) -> tuple[np.ndarray, float]:
    """Per-window RMSE against the truth at window start, and its mean after `spinup` windows."""
    series = np.empty(len(analyses))
    for k, state in enumerate(analyses):
        try:
            reference = truth[truth.index_of(state.time)]
        except HorizonError as e:
            raise HorizonError(f"Analysis {k} at t={state.time:.6g} has no matching truth state") from e
        series[k] = rmse(state, reference)
    if len(series) <= spinup:
        raise ValueError(f"{len(series)} windows leave nothing after {spinup} spin-up windows")
    return series, float(series[spinup:].mean())


@dataclass(frozen=True)
class ScalingStats:
    exact_mean: float
    exact_std: float
    predicted_mean: float
    predicted_std: float

    @property
    def mean_error(self) -> float:
        return abs(self.predicted_mean - self.exact_mean) / abs(self.exact_mean)

    @property
    def std_error(self) -> float:
        return abs(self.predicted_std - self.exact_std) / self.exact_std


def prediction_scaling(exact: np.ndarray, predicted: np.ndarray) -> ScalingStats:
    """Spatial mean and standard deviation of an exact field and its prediction."""
    return ScalingStats(
        float(np.mean(exact)), float(np.std(exact)), float(np.mean(predicted)), float(np.std(predicted))
    )


# --- Architecture sweep ---


@dataclass(frozen=True)
class SweepInputs:
    """Trajectories and models shared by every sweep cell."""

    train: Trajectory
    valid: Trajectory
    test_sources: tuple[Trajectory, ...]
    test_truths: tuple[Trajectory, ...]
    original_params: QgParams
    true_params: QgParams
    fs_inits: tuple[ModelState, ...]
    source: str = "analysis"


@dataclass(frozen=True)
class SweepRecord:
    spec: NetworkSpec
    tau_hours: float
    n_samples: int
    nmse_increments: float = float("nan")
    nmse_truth: float = float("nan")
    fs_selection: float = float("nan")
    analysis_rmse: float | None = None
    diverged: bool = False
    flagged: bool = False
    note: str = ""
    result: TrainResult | None = field(default=None, compare=False, repr=False)

    @property
    def usable(self) -> bool:
        return not (self.diverged or self.flagged) and math.isfinite(self.fs_selection)


@dataclass(frozen=True)
class SweepResult:
    records: tuple[SweepRecord, ...]

    def cell(self, tau_hours: float, n_samples: int) -> list[SweepRecord]:
        return [r for r in self.records if r.tau_hours == tau_hours and r.n_samples == n_samples]

    def best(self, tau_hours: float, n_samples: int) -> SweepRecord | None:
        return select_best(self.cell(tau_hours, n_samples))


def select_best(
    records: Sequence[SweepRecord], activations: Sequence[str] | None = None
) -> SweepRecord | None:
    """Lowest forecast skill at the selection lead, optionally restricted to some activations."""
    pool = [
        r
        for r in records
        if r.usable and (activations is None or _hidden_activation(r.spec) in activations)
    ]
    return min(pool, key=lambda r: r.fs_selection, default=None)


def _hidden_activation(spec: NetworkSpec) -> str:
    hidden = [layer for layer in spec.layers if layer.has_params][:-1]
    return hidden[0].activation if hidden else "linear"


def _selection_lead(tau: float, lead_days: float) -> float:
    """The selection lead rounded up to a whole number of sampling periods, in days."""
    return math.ceil(lead_days * DAY / tau - 1e-9) * tau / DAY


def _evaluate_spec(
    spec: NetworkSpec,
    tau_hours: float,
    n_samples: int,
    db_train: TrainingDatabase,
    db_valid: TrainingDatabase,
    test_increments: tuple[TrainingDatabase, ...],
    test_truth: tuple[TrainingDatabase, ...],
    inputs: SweepInputs,
    config: TrainConfig,
    lead_days: float,
) -> SweepRecord:
    try:
        result = train(spec, db_train, db_valid, config)
    except TrainingDivergedError as e:
        logger.warning(f"{spec.name} diverged at epoch {e.epoch} (tau={tau_hours:g} h, N={n_samples})")
        return SweepRecord(spec, tau_hours, n_samples, diverged=True, note=str(e))
    correction = NetworkCorrection(spec, result.params, result.normalizer, db_train.config.tau)
    nmse_inc, _ = mean_normalized_mse(spec, result.params, result.normalizer, test_increments)
    nmse_true, _ = mean_normalized_mse(spec, result.params, result.normalizer, test_truth)
    lead = _selection_lead(correction.tau, lead_days)
    curve = forecast_skill(
        ModelForecaster(inputs.true_params, "true"),
        HybridForecaster(inputs.original_params, correction),
        inputs.fs_inits,
        [lead],
        n_jobs=1,
    )
    return SweepRecord(
        spec,
        tau_hours,
        n_samples,
        nmse_increments=nmse_inc,
        nmse_truth=nmse_true,
        fs_selection=float(curve.fs[0]),
        result=result,
    )


def run_sweep(
    taus_hours: Sequence[float],
    n_samples_list: Sequence[int],
    specs: Sequence[NetworkSpec],
    inputs: SweepInputs,
    config: TrainConfig,
    *,
    selection_lead_days: float = SELECTION_LEAD_DAYS,
    n_jobs: int | None = None,
) -> SweepResult:
    """
    Train every architecture on every (tau, n_samples) cell and score it.

    A cell whose training targets have no variance (the original model equals the truth) or whose
    trajectories are too short is flagged instead of trained. Within a cell the architectures
    train in parallel with identical seeds.
    """
    orig = inputs.original_params
    records: list[SweepRecord] = []
    for tau_hours in taus_hours:
        for n_samples in n_samples_list:
            cell = DatasetConfig(tau_hours=tau_hours, n_samples=n_samples, source=inputs.source)
            try:
                db_train = build_database(inputs.train, orig, cell)
                normalizer = compute_normalizer(db_train)
                db_train = db_train.with_normalizer(normalizer)
                stride_valid = whole_steps(cell.tau, inputs.valid.dt_between, "sampling period")
                n_valid = min(n_samples, max_samples(len(inputs.valid), stride_valid))
                if n_valid < 1:
                    raise DatasetTooShortError(1, n_valid)
                db_valid = build_database(inputs.valid, orig, cell.model_copy(update={"n_samples": n_valid}))
                test_inc = tuple(build_full_database(t, orig, cell) for t in inputs.test_sources)
                test_true = tuple(
                    build_full_database(t, orig, cell.model_copy(update={"source": "truth"}))
                    for t in inputs.test_truths
                )
                for db in (*test_inc, *test_true):
                    if float(np.var(db.targets)) == 0.0:
                        raise ZeroVarianceError(f"Test targets of '{db.source_id}' have zero variance")
            except QgmlError as e:
                logger.warning(f"Sweep cell tau={tau_hours:g} h, N={n_samples} flagged: {e}")
                records += [
                    SweepRecord(spec, tau_hours, n_samples, flagged=True, note=str(e)) for spec in specs
                ]
                continue
            cell_records = Parallel(n_jobs=worker_count(n_jobs))(
                delayed(_evaluate_spec)(
                    spec, tau_hours, n_samples, db_train, db_valid, test_inc, test_true,
                    inputs, config, selection_lead_days,
                )
                for spec in specs
            )
            records += cell_records
            best = select_best(cell_records)
            if best is not None:
                logger.info(
                    f"Cell tau={tau_hours:g} h, N={n_samples}: best {best.spec.name} with FS "
                    f"{best.fs_selection:.4g}"
                )
    return SweepResult(tuple(records))

