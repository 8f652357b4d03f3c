import math

import numpy as np
import pytest

from qgml.constants import DAY, HOUR
from qgml.dataset import DatasetConfig, TrainingDatabase
from qgml.evaluation import (
    HybridForecaster,
    ModelForecaster,
    SurrogateForecaster,
    SweepInputs,
    SweepRecord,
    SweepResult,
    analysis_rmse,
    climatology,
    doubling_time,
    fit_doubling_time,
    forecast_skill,
    initial_states,
    mean_normalized_mse,
    model_error,
    normalized_mse,
    pooled_climatology,
    prediction_scaling,
    rmse,
    run_sweep,
    select_best,
    variability_mismatch,
)
from qgml.exceptions import GridMismatchError, HorizonError, NoExponentialRegimeError, ZeroVarianceError
from qgml.neural import NetworkCorrection, Normalizer, TrainConfig, dense_template, param_count, sweep_specs
from qgml.qg import (
    ModelState,
    QgParams,
    Trajectory,
    generate_trajectory,
    initial_jet_state,
    reference_params,
    resolvent,
)

from .conftest import SMALL_GRID

SPEC = dense_template(1, 4, "linear", SMALL_GRID.state_shape)


def _constant_correction(value: float, tau: float) -> NetworkCorrection:
    normalizer = Normalizer(input_mean=0.0, input_std=1.0, output_mean=value, output_std=1.0)
    return NetworkCorrection(SPEC, np.zeros(param_count(SPEC)), normalizer, tau)


def _hourly(state: ModelState, params: QgParams, hours: int, source_id: str) -> Trajectory:
    traj = generate_trajectory(state, params, 0.0, hours * HOUR, HOUR)
    return Trajectory(traj.psi, traj.t0, traj.dt_between, source_id)


def _record(name_width: int, fs: float, activation: str = "linear", **flags: bool) -> SweepRecord:
    spec = dense_template(1, name_width, activation, SMALL_GRID.state_shape)
    return SweepRecord(spec, 24.0, 128, fs_selection=fs, **flags)


def test_rmse_of_states(rng: np.random.Generator) -> None:
    a = rng.standard_normal(SMALL_GRID.state_shape)
    assert rmse(ModelState(a), ModelState(a + 2.0)) == pytest.approx(2.0)
    with pytest.raises(GridMismatchError):
        rmse(a, a[0])


def test_skill_of_identical_models_is_zero(spun_up_state: ModelState, true_params: QgParams) -> None:
    model = ModelForecaster(true_params)
    curve = forecast_skill(model, model, [spun_up_state], [0.0, 1 / 24, 2 / 24], n_jobs=1)
    np.testing.assert_array_equal(curve.fs, 0.0)
    assert curve.n_members == 1


def test_skill_of_original_model_grows_from_zero(
    spun_up_state: ModelState, true_params: QgParams, original_params: QgParams
) -> None:
    inits = [spun_up_state, resolvent(spun_up_state, true_params, 6 * HOUR)]
    curve = forecast_skill(
        ModelForecaster(true_params, "true"),
        ModelForecaster(original_params, "original"),
        inits,
        [0.0, 0.25, 0.5],
        n_jobs=1,
    )
    assert curve.fs[0] == 0.0
    assert 0.0 < curve.fs[1] < curve.fs[2]
    assert (curve.true_model, curve.test_model) == ("true", "original")


def test_skill_is_the_member_mean(
    spun_up_state: ModelState, true_params: QgParams, original_params: QgParams
) -> None:
    second = resolvent(spun_up_state, true_params, 6 * HOUR)
    true_model, test_model = ModelForecaster(true_params), ModelForecaster(original_params)
    both = forecast_skill(true_model, test_model, [spun_up_state, second], [0.5], n_jobs=1)
    singles = [
        forecast_skill(true_model, test_model, [init], [0.5], n_jobs=1).fs[0]
        for init in (spun_up_state, second)
    ]
    assert both.fs[0] == pytest.approx(np.mean(singles))


def test_skill_lead_validation(spun_up_state: ModelState, true_params: QgParams, original_params: QgParams) -> None:
    true_model, test_model = ModelForecaster(true_params), ModelForecaster(original_params)
    with pytest.raises(ValueError):
        forecast_skill(true_model, test_model, [spun_up_state], [1.0, 0.5])
    with pytest.raises(ValueError):
        forecast_skill(true_model, test_model, [], [1.0])
    with pytest.raises(HorizonError):
        forecast_skill(true_model, test_model, [spun_up_state], [10 / (24 * 60)])


def test_hybrid_with_zero_correction_is_the_original_model(
    spun_up_state: ModelState, original_params: QgParams
) -> None:
    hybrid = HybridForecaster(original_params, _constant_correction(0.0, 2 * HOUR))
    plain = ModelForecaster(original_params)
    assert np.array_equal(
        hybrid.advance(spun_up_state, 6 * HOUR).psi, plain.advance(spun_up_state, 6 * HOUR).psi
    )
    assert hybrid.granularity == pytest.approx(2 * HOUR)
    with pytest.raises(HorizonError):
        hybrid.advance(spun_up_state, HOUR)


def test_surrogate_replaces_the_state(spun_up_state: ModelState) -> None:
    surrogate = SurrogateForecaster(_constant_correction(0.5, HOUR))
    after = surrogate.advance(spun_up_state, 3 * HOUR)
    np.testing.assert_allclose(after.psi, 0.5)
    assert after.time == pytest.approx(spun_up_state.time + 3 * HOUR)


def test_model_error_vanishes_for_identical_setups(
    spun_up_state: ModelState, true_params: QgParams, original_params: QgParams
) -> None:
    assert not np.any(model_error(spun_up_state, original_params, original_params, HOUR))
    assert np.abs(model_error(spun_up_state, true_params, original_params, HOUR)).max() > 0


def test_initial_states_are_spread_evenly(rng: np.random.Generator) -> None:
    traj = Trajectory(rng.standard_normal((10, *SMALL_GRID.state_shape)), 0.0, 1.0)
    picks = initial_states([traj], 3, 2.0)
    assert [s.time for s in picks] == [0.0, 4.0, 8.0]
    with pytest.raises(HorizonError):
        initial_states([traj], 6, 2.0)


def test_climatology_needs_a_long_run(rng: np.random.Generator) -> None:
    traj = Trajectory(rng.standard_normal((11, *SMALL_GRID.state_shape)), 0.0, DAY)
    with pytest.raises(HorizonError):
        climatology(traj)
    clim = climatology(traj, min_span_days=10)
    np.testing.assert_allclose(clim.std, np.std(traj.psi, axis=0))
    assert clim.variability == pytest.approx(float(np.mean(clim.std)))


def test_variability_mismatch(rng: np.random.Generator) -> None:
    a = Trajectory(rng.standard_normal((20, *SMALL_GRID.state_shape)), 0.0, DAY)
    b = Trajectory(3.0 * rng.standard_normal((20, *SMALL_GRID.state_shape)), 20 * DAY, DAY)
    pooled = pooled_climatology([a, a])
    assert variability_mismatch(a, pooled) == pytest.approx(0.0, abs=1e-12)
    assert variability_mismatch(b, pooled_climatology([a])) > 1.0
    flat = Trajectory(np.zeros((3, *SMALL_GRID.state_shape)), 0.0, DAY)
    with pytest.raises(ZeroVarianceError):
        variability_mismatch(a, pooled_climatology([flat]))


def test_doubling_time_of_pure_exponential() -> None:
    times = np.arange(20) * 0.5
    errors = 1e-4 * 2.0 ** (times / 3.0)
    assert fit_doubling_time(times, errors) == pytest.approx(3.0)


def test_doubling_time_ignores_saturation() -> None:
    times = np.arange(30, dtype=float)
    errors = np.minimum(1e-4 * 2.0 ** (times / 2.0), 1e-4 * 2.0**5)
    result = fit_doubling_time(times, errors)
    assert 1.5 < result < 3.0


@pytest.mark.parametrize(
    "errors",
    [
        np.exp(-np.arange(10.0)),
        np.array([0.0, 0.0, 0.0, 1.0, 2.0, 4.0, 0.0, 0.0]),
    ],
)
def test_no_exponential_regime(errors: np.ndarray) -> None:
    with pytest.raises(NoExponentialRegimeError):
        fit_doubling_time(np.arange(len(errors), dtype=float), errors)


def test_normalized_mse_of_mean_predictor(rng: np.random.Generator) -> None:
    targets = 0.3 + rng.standard_normal((6, *SMALL_GRID.state_shape))
    db = TrainingDatabase(rng.standard_normal(targets.shape), targets, DatasetConfig(n_samples=6), 0.012)
    normalizer = Normalizer(input_mean=0.0, input_std=1.0, output_mean=float(np.mean(targets)), output_std=1.0)
    params = np.zeros(param_count(SPEC))
    assert normalized_mse(SPEC, params, normalizer, db) == pytest.approx(1.0)
    mean, std = mean_normalized_mse(SPEC, params, normalizer, [db, db])
    assert (mean, std) == (pytest.approx(1.0), pytest.approx(0.0, abs=1e-12))


def test_normalized_mse_needs_target_spread(rng: np.random.Generator) -> None:
    db = TrainingDatabase(
        rng.standard_normal((2, *SMALL_GRID.state_shape)),
        np.ones((2, *SMALL_GRID.state_shape)),
        DatasetConfig(n_samples=2),
        0.012,
    )
    normalizer = Normalizer(input_mean=0.0, input_std=1.0, output_mean=0.0, output_std=1.0)
    with pytest.raises(ZeroVarianceError):
        normalized_mse(SPEC, np.zeros(param_count(SPEC)), normalizer, db)


def test_analysis_rmse_after_spinup(rng: np.random.Generator) -> None:
    truth = Trajectory(rng.standard_normal((25, *SMALL_GRID.state_shape)), 0.0, HOUR)
    analyses = Trajectory(truth.psi[::6] + 0.1, 0.0, 6 * HOUR)
    series, mean = analysis_rmse(analyses, truth, spinup=2)
    np.testing.assert_allclose(series, 0.1)
    assert mean == pytest.approx(0.1)
    with pytest.raises(ValueError):
        analysis_rmse(analyses, truth, spinup=5)
    shifted = Trajectory(analyses.psi, 0.5 * HOUR, 6 * HOUR)
    with pytest.raises(HorizonError):
        analysis_rmse(shifted, truth, spinup=0)


def test_prediction_scaling(rng: np.random.Generator) -> None:
    exact = rng.standard_normal(SMALL_GRID.state_shape)
    stats = prediction_scaling(exact, 0.5 * exact)
    assert stats.std_error == pytest.approx(0.5)
    assert stats.mean_error == pytest.approx(0.5)


def test_select_best_skips_unusable_records() -> None:
    records = [
        _record(4, 0.3),
        _record(8, 0.1, diverged=True),
        _record(16, 0.2, "relu"),
        _record(16, 0.05, flagged=True),
        _record(8, math.nan),
    ]
    assert select_best(records).spec.name == "D-1x16-relu"
    assert select_best(records, activations=["linear"]).spec.name == "D-1x4-linear"
    assert select_best(records[1:2]) is None
    result = SweepResult(tuple(records))
    assert len(result.cell(24.0, 128)) == 5
    assert result.cell(12.0, 128) == []
    assert result.best(24.0, 128).fs_selection == 0.2


def _sweep_inputs(start: ModelState, true_params: QgParams, original_params: QgParams) -> SweepInputs:
    train = _hourly(start, true_params, 5, "member_00")
    valid = _hourly(train[-1], true_params, 2, "member_01")
    test = _hourly(valid[-1], true_params, 3, "member_02")
    return SweepInputs(
        train=train,
        valid=valid,
        test_sources=(test,),
        test_truths=(test,),
        original_params=original_params,
        true_params=true_params,
        fs_inits=(test[0],),
        source="truth",
    )


def test_sweep_trains_and_scores(
    spun_up_state: ModelState, true_params: QgParams, original_params: QgParams
) -> None:
    specs = sweep_specs(SMALL_GRID.state_shape, families=("D",), depths=(1,), widths=(4,), activations=("linear", "relu"))
    inputs = _sweep_inputs(spun_up_state, true_params, original_params)
    config = TrainConfig(epochs_phase1=3, epochs_phase2=1)
    result = run_sweep([1.0], [4], specs, inputs, config, selection_lead_days=1 / 24, n_jobs=1)
    assert len(result.records) == 2
    for record in result.records:
        assert not record.flagged
        assert math.isfinite(record.nmse_increments)
        assert math.isfinite(record.fs_selection)
        assert record.result is not None
    assert result.best(1.0, 4) is not None


def test_sweep_flags_cells_without_model_error(spun_up_state: ModelState, original_params: QgParams) -> None:
    specs = sweep_specs(SMALL_GRID.state_shape, families=("D",), depths=(1,), widths=(4,), activations=("linear",))
    inputs = _sweep_inputs(spun_up_state, original_params, original_params)
    result = run_sweep([1.0], [4], specs, inputs, TrainConfig(epochs_phase1=1, epochs_phase2=0), n_jobs=1)
    assert [r.flagged for r in result.records] == [True]
    assert "zero variance" in result.records[0].note
    assert result.best(1.0, 4) is None


def test_sweep_flags_cells_that_are_too_large(
    spun_up_state: ModelState, true_params: QgParams, original_params: QgParams
) -> None:
    specs = sweep_specs(SMALL_GRID.state_shape, families=("D",), depths=(1,), widths=(4,), activations=("linear",))
    inputs = _sweep_inputs(spun_up_state, true_params, original_params)
    result = run_sweep([1.0], [50], specs, inputs, TrainConfig(epochs_phase1=1, epochs_phase2=0), n_jobs=1)
    assert result.records[0].flagged


@pytest.mark.slow
def test_reference_model_doubling_time() -> None:
    params = reference_params()
    start = generate_trajectory(initial_jet_state(params), params, 60 * DAY, 0.0, params.dt_step)[0]
    spread = float(np.mean(np.std(generate_trajectory(start, params, 0.0, 60 * DAY, DAY).psi, axis=0)))
    value = doubling_time(params, start, spread)
    assert 150 * HOUR <= value <= 350 * HOUR
