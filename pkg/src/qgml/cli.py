"""
Command-line entry point.

Each subcommand runs one stage of the twin experiment, reads the artifacts of the stages before
it from the output directory and writes its own, followed by a RunManifest. Stages:

    truth       reference trajectories from one long spun-up run
    obs         observation files sampled from every truth trajectory
    assimilate  cycled 4D-Var with the original, hybrid or oracle-forced model
    dataset     training databases from analyses and from the truth
    train       one network, or the architecture sweep
    skill       forecast skill of the original and hybrid models
    report      aggregated metrics
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from qgml import __version__
from qgml.artifacts import (
    RunManifest,
    WeightsFile,
    build_manifest,
    check_grid,
    read_dataset,
    read_manifest,
    read_metrics_csv,
    read_obs,
    read_trajectory,
    read_weights,
    write_dataset,
    write_manifest,
    write_metrics_csv,
    write_obs,
    write_trajectory,
    write_weights,
)
from qgml.config import ExperimentConfig, load_document, parse_config, parse_duration_hours
from qgml.constants import (
    ANALYSIS_CSV_COLUMNS,
    ANALYSIS_SUBDIR,
    CLIMATOLOGY_TOLERANCE,
    DATASET_SUBDIR,
    DAY,
    HOUR,
    MANIFEST_SUBDIR,
    OBS_SUBDIR,
    REPORT_CSV_COLUMNS,
    REPORT_SUBDIR,
    SKILL_CSV_COLUMNS,
    SKILL_SUBDIR,
    SWEEP_CSV_COLUMNS,
    TRUTH_SUBDIR,
    WEIGHTS_SUBDIR,
)
from qgml.covariance import CovarianceOperator
from qgml.dataset import TrainingDatabase, assign_roles, build_full_database, compute_normalizer, head
from qgml.evaluation import (
    HybridForecaster,
    ModelForecaster,
    SurrogateForecaster,
    SweepInputs,
    forecast_skill,
    initial_states,
    mean_normalized_mse,
    pooled_climatology,
    run_sweep,
    variability_mismatch,
)
from qgml.exceptions import ConfigurationError, DependencyError, QgmlError
from qgml.neural import sweep_specs, train
from qgml.observations import generate_obs
from qgml.qg import Trajectory, generate_trajectory, initial_jet_state
from qgml.utils import derive_seed
from qgml.var4d import OracleCorrection, cold_start_background, cycle

logger = logging.getLogger(__name__)

STAGES = ("truth", "obs", "assimilate", "dataset", "train", "skill", "report")


@dataclass(frozen=True)
class RunLayout:
    """Where every artifact of a run lives under the output directory."""

    root: Path

    def truth(self, member: str) -> Path:
        return self.root / TRUTH_SUBDIR / f"{member}.qgt"

    def obs(self, member: str) -> Path:
        return self.root / OBS_SUBDIR / f"{member}.jsonl"

    def analysis(self, run: str, member: str) -> Path:
        return self.root / ANALYSIS_SUBDIR / run / f"{member}.qgt"

    def analysis_csv(self, run: str, member: str) -> Path:
        return self.root / ANALYSIS_SUBDIR / run / f"{member}.csv"

    def dataset(self, source: str, tau_hours: float, member: str) -> Path:
        return self.root / DATASET_SUBDIR / source / f"tau{tau_hours:g}h" / f"{member}.qgd"

    def weights(self, name: str = "corrector") -> Path:
        return self.root / WEIGHTS_SUBDIR / f"{name}.json"

    def skill(self) -> Path:
        return self.root / SKILL_SUBDIR / "skill.csv"

    def report(self, name: str = "summary") -> Path:
        return self.root / REPORT_SUBDIR / f"{name}.csv"

    def manifest(self, stage: str) -> Path:
        return self.root / MANIFEST_SUBDIR / f"{stage}.json"


@dataclass
class StageOutput:
    label: str = ""
    produced: list[Path] = field(default_factory=list)
    inputs: list[Path] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)


def member_ids(config: ExperimentConfig) -> list[str]:
    return [f"member_{j:02d}" for j in range(config.truth.n_trajectories)]


def analysis_run_name(mode: str, tau_hours: float) -> str:
    return mode if mode == "original" else f"{mode}_tau{tau_hours:g}h"


def _require_stage(layout: RunLayout, stage: str) -> RunManifest:
    return read_manifest(layout.manifest(stage), producer=stage)


def _weights_path(config: ExperimentConfig, layout: RunLayout) -> Path:
    return config.paths.weights or layout.weights()


def _read_weights(config: ExperimentConfig, layout: RunLayout) -> tuple[Path, WeightsFile]:
    path = _weights_path(config, layout)
    if not path.exists():
        raise DependencyError(f"trained weights at {path} (paths.weights)", "train")
    return path, read_weights(path)


# --- Stages ---


def run_truth(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    """Consecutive segments of one long run, each after a gap of member_separation_days."""
    params = config.model.true_params()
    state = initial_jet_state(params)
    store = config.truth.store_every_minutes / 60.0 * HOUR
    length = config.member_days() * DAY
    gap = config.truth.spinup_days * DAY
    out = StageOutput()
    members: list[Trajectory] = []
    for member in member_ids(config):
        traj = generate_trajectory(state, params, gap, length, store, progress=progress)
        traj = replace(traj, source_id=member)
        members.append(traj)
        out.produced.append(write_trajectory(layout.truth(member), traj))
        state = traj[len(traj) - 1]
        gap = config.truth.member_separation_days * DAY

    if config.truth.climatology_check and len(members) > 1:
        reference = pooled_climatology(members)
        logger.info(f"Truth variability {reference.variability:.4g}")
        for traj in members:
            mismatch = variability_mismatch(traj, reference)
            if mismatch > CLIMATOLOGY_TOLERANCE:
                logger.warning(
                    f"{traj.source_id} variability differs from the long run by {100 * mismatch:.1f} %"
                )
    return out


def run_obs(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    _require_stage(layout, "truth")
    grid = config.model.grid
    out = StageOutput()
    for member in member_ids(config):
        path = layout.truth(member)
        truth = check_grid(read_trajectory(path, producer="truth"), grid, path)
        seed = derive_seed(config.seed, f"obs/{member}")
        db = generate_obs(truth, config.obs.model_copy(update={"seed": seed}), grid, source_id=member)
        out.inputs.append(path)
        out.seeds[member] = seed
        out.produced.append(write_obs(layout.obs(member), db))
    return out


def run_assimilate(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    _require_stage(layout, "obs")
    da = config.effective_da()
    orig = config.model.original_params()
    out = StageOutput()
    correction = None
    tau_hours = da.tau_hours
    if da.mode == "oracle":
        correction = OracleCorrection(config.model.true_params(), orig, tau_hours * HOUR)
    elif da.mode == "hybrid":
        path, weights = _read_weights(config, layout)
        if weights.baseline != "original":
            raise ConfigurationError("Hybrid assimilation needs a corrector, not a surrogate network")
        tau_hours = weights.tau_hours
        correction = weights.correction()
        out.inputs.append(path)
    run = analysis_run_name(da.mode, tau_hours)
    out.label = f"assimilate_{run}"
    covariance = CovarianceOperator.build(da.covariance, orig.grid)

    for member in member_ids(config):
        truth = check_grid(read_trajectory(layout.truth(member)), orig.grid, layout.truth(member))
        obs_db = read_obs(layout.obs(member), config.obs)
        n_windows = min(obs_db.n_windows, config.truth.length_windows)
        seed = derive_seed(config.seed, f"background/{member}")
        start = truth[truth.index_of(obs_db.window_start(0))]
        x_b = cold_start_background(start, covariance, np.random.default_rng(seed))
        result = cycle(
            obs_db, orig, da, n_windows, x_b, correction=correction, truth=truth, progress=progress
        )
        rows = [
            {
                "window_index": r.window_index,
                "analysis_rmse": r.analysis_rmse,
                "background_rmse": r.background_rmse,
                "final_cost": r.final_cost,
                "iterations": r.iterations,
            }
            for r in result.records
        ]
        out.seeds[member] = seed
        out.inputs += [layout.truth(member), layout.obs(member)]
        out.produced.append(
            write_trajectory(layout.analysis(run, member), replace(result.analyses, source_id=member))
        )
        out.produced.append(write_metrics_csv(layout.analysis_csv(run, member), rows, ANALYSIS_CSV_COLUMNS))
    return out


def run_dataset(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    """Full-size analysis and truth databases per member and period; train slices what it needs."""
    _require_stage(layout, "assimilate_original")
    orig = config.model.original_params()
    out = StageOutput()
    for tau_hours in config.dataset.taus_hours:
        cell = config.dataset.cell(tau_hours)
        for member in member_ids(config):
            analysis_path = layout.analysis("original", member)
            sources = {
                "analysis": read_trajectory(analysis_path, producer="assimilate"),
                "truth": read_trajectory(layout.truth(member)),
            }
            out.inputs += [analysis_path, layout.truth(member)]
            for source, traj in sources.items():
                db = build_full_database(
                    traj, orig, cell.model_copy(update={"source": source}), progress=progress
                )
                out.produced.append(write_dataset(layout.dataset(source, tau_hours, member), db))
    return out


def _training_pair(
    config: ExperimentConfig, layout: RunLayout, tau_hours: float, n_samples: int, out: StageOutput
) -> tuple[TrainingDatabase, TrainingDatabase]:
    roles = assign_roles(member_ids(config))
    source = config.dataset.source
    train_path = layout.dataset(source, tau_hours, roles["train"][0])
    valid_path = layout.dataset(source, tau_hours, roles["valid"][0])
    db_train = head(read_dataset(train_path), n_samples)
    db_valid = read_dataset(valid_path)
    db_valid = head(db_valid, min(n_samples, len(db_valid)))
    out.inputs += [train_path, valid_path]
    return db_train.with_normalizer(compute_normalizer(db_train)), db_valid


def run_train(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    out = StageOutput()
    grid = config.model.grid
    tau_hours = config.dataset.taus_hours[0]
    seed = derive_seed(config.seed, "train")
    optimizer = config.train.optimizer.model_copy(update={"seed": seed, "progress": progress})
    out.seeds["train"] = seed
    baseline = config.dataset.baseline

    if not config.train.sweep:
        _require_stage(layout, "dataset")
        db_train, db_valid = _training_pair(config, layout, tau_hours, config.dataset.n_samples[0], out)
        spec = config.train.architecture.spec(grid)
        result = train(spec, db_train, db_valid, optimizer)
        weights = WeightsFile.from_result(spec, result, tau_hours, baseline)
        history = pd.DataFrame(
            {
                "epoch": np.arange(len(result.history.train_mse)),
                "train_mse": result.history.train_mse,
                "valid_mse": result.history.valid_mse,
            }
        )
        out.produced.append(write_weights(_weights_path(config, layout), weights))
        out.produced.append(
            write_metrics_csv(layout.report("training_history"), history, list(history.columns))
        )
        return out

    _require_stage(layout, "assimilate_original")
    roles = assign_roles(member_ids(config))
    orig, true = config.model.original_params(), config.model.true_params()

    def source_traj(member: str) -> Trajectory:
        if config.dataset.source == "truth":
            path = layout.truth(member)
        else:
            path = layout.analysis("original", member)
        out.inputs.append(path)
        return read_trajectory(path, producer="assimilate")

    test_truths = tuple(read_trajectory(layout.truth(m)) for m in roles["test"])
    inputs = SweepInputs(
        train=source_traj(roles["train"][0]),
        valid=source_traj(roles["valid"][0]),
        test_sources=tuple(read_trajectory(layout.analysis("original", m)) for m in roles["test"]),
        test_truths=test_truths,
        original_params=orig,
        true_params=true,
        fs_inits=tuple(
            initial_states(test_truths, config.evaluation.ensemble_size, config.obs.window_length)
        ),
        source=config.dataset.source,
    )
    result = run_sweep(
        config.dataset.taus_hours, config.dataset.n_samples, sweep_specs(grid.state_shape), inputs, optimizer
    )
    rows = [
        {
            "network": r.spec.name,
            "tau_hours": r.tau_hours,
            "n_samples": r.n_samples,
            "nmse_increments": r.nmse_increments,
            "nmse_truth": r.nmse_truth,
            "fs_selection": r.fs_selection,
            "diverged": r.diverged,
            "flagged": r.flagged,
        }
        for r in result.records
    ]
    out.produced.append(write_metrics_csv(layout.report("sweep"), rows, SWEEP_CSV_COLUMNS))
    for tau in config.dataset.taus_hours:
        for n in config.dataset.n_samples:
            best = result.best(tau, n)
            if best is None or best.result is None:
                logger.warning(f"No usable network for tau={tau:g} h, N={n}")
                continue
            weights = WeightsFile.from_result(best.spec, best.result, tau, baseline)
            out.produced.append(write_weights(layout.weights(f"sweep_tau{tau:g}h_n{n}"), weights))
            if tau == config.dataset.taus_hours[0] and n == config.dataset.n_samples[0]:
                out.produced.append(write_weights(_weights_path(config, layout), weights))
    return out


def run_skill(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    _require_stage(layout, "truth")
    out = StageOutput()
    path, weights = _read_weights(config, layout)
    out.inputs.append(path)
    members = member_ids(config)
    roles = assign_roles(members)
    truths = [read_trajectory(layout.truth(m)) for m in members]
    test_truths = [t for t, m in zip(truths, members, strict=True) if m in roles["test"]]
    inits = initial_states(test_truths, config.evaluation.ensemble_size, config.obs.window_length)
    orig = config.model.original_params()
    true_model = ModelForecaster(config.model.true_params(), "true")
    correction = weights.correction()
    if weights.baseline == "none":
        test_model = SurrogateForecaster(correction)
    else:
        test_model = HybridForecaster(orig, correction)
    leads = config.evaluation.leads_days
    fs_orig = forecast_skill(true_model, ModelForecaster(orig, "original"), inits, leads)
    fs_test = forecast_skill(true_model, test_model, inits, leads)
    variability = pooled_climatology(truths).variability
    frame = pd.DataFrame(
        {
            "lead_days": fs_orig.lead_days,
            "fs_original": fs_orig.fs,
            "fs_hybrid": fs_test.fs,
            "variability": variability,
        }
    )
    for row in frame.itertuples():
        logger.info(
            f"Lead {row.lead_days:g} d: FS original {row.fs_original:.4g}, {test_model.name} {row.fs_hybrid:.4g}"
        )
    out.inputs += [layout.truth(m) for m in members]
    out.produced.append(write_metrics_csv(layout.skill(), frame, SKILL_CSV_COLUMNS))
    return out


def run_report(config: ExperimentConfig, layout: RunLayout, *, progress: bool = False) -> StageOutput:
    """Averages over trajectories of every metric whose artifacts exist."""
    out = StageOutput()
    rows = []
    spinup = config.evaluation.spinup_windows
    analysis_root = layout.root / ANALYSIS_SUBDIR
    for run_dir in sorted(p for p in analysis_root.glob("*") if p.is_dir()):
        per_member = []
        for csv in sorted(run_dir.glob("*.csv")):
            frame = read_metrics_csv(csv, ANALYSIS_CSV_COLUMNS)
            if len(frame) > spinup:
                per_member.append(float(frame["analysis_rmse"].iloc[spinup:].mean()))
            out.inputs.append(csv)
        if per_member:
            rows.append(_summary_row(f"analysis_rmse/{run_dir.name}", per_member))

    weights_path = _weights_path(config, layout)
    if weights_path.exists():
        weights = read_weights(weights_path)
        roles = assign_roles(member_ids(config))
        params = weights.flat_params()
        sources = ("truth",) if weights.baseline == "none" else ("analysis", "truth")
        for source in sources:
            paths = [layout.dataset(source, weights.tau_hours, m) for m in roles["test"]]
            if not all(p.exists() for p in paths):
                continue
            dbs = [read_dataset(p) for p in paths]
            mean, std = mean_normalized_mse(weights.spec, params, weights.normalizer, dbs)
            name = "nmse_increments" if source == "analysis" else "nmse_truth"
            rows.append({"metric": name, "mean": mean, "std": std, "n": len(dbs)})
            out.inputs += paths
        out.inputs.append(weights_path)

    if layout.skill().exists():
        skill = read_metrics_csv(layout.skill(), SKILL_CSV_COLUMNS)
        for row in skill.itertuples():
            for column in ("fs_original", "fs_hybrid"):
                rows.append(
                    {
                        "metric": f"{column}/{row.lead_days:g}d",
                        "mean": getattr(row, column),
                        "std": float("nan"),
                        "n": config.evaluation.ensemble_size,
                    }
                )
        out.inputs.append(layout.skill())

    if not rows:
        raise DependencyError("metrics to report", "assimilate")
    out.produced.append(write_metrics_csv(layout.report(), rows, REPORT_CSV_COLUMNS))
    return out


def _summary_row(metric: str, values: Sequence[float]) -> dict:
    arr = np.asarray(values)
    return {"metric": metric, "mean": float(arr.mean()), "std": float(arr.std()), "n": len(arr)}


# --- Dispatch ---


def run_command(
    subcommand: str,
    config: ExperimentConfig,
    *,
    progress: bool = False,
) -> RunManifest:
    """Run one stage and write its manifest."""
    layout = RunLayout(config.out_dir)
    logger.info(f"Running {subcommand} into {layout.root}")
    runners = {
        "truth": run_truth,
        "obs": run_obs,
        "assimilate": run_assimilate,
        "dataset": run_dataset,
        "train": run_train,
        "skill": run_skill,
        "report": run_report,
    }
    if subcommand not in runners:
        raise ConfigurationError(f"Unknown subcommand {subcommand!r}; choose from {', '.join(STAGES)}")
    out = runners[subcommand](config, layout, progress=progress)
    name = out.label or subcommand

    manifest = build_manifest(
        subcommand,
        layout.root,
        config.snapshot(),
        out.produced,
        seeds={"master": config.seed, **out.seeds},
        inputs=set(out.inputs),
    )
    write_manifest(layout.manifest(name), manifest)
    logger.info(f"{subcommand} finished: {len(out.produced)} artifacts")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgml", description="Hybrid QG model-error learning workbench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=STAGES)
    parser.add_argument("--config", type=Path, help="Experiment JSON document")
    parser.add_argument("--mode", choices=("original", "hybrid", "oracle"), help="Assimilation model")
    parser.add_argument("--tau", help="Sampling period, e.g. 3h or 1d")
    parser.add_argument("--out", type=Path, help="Output directory")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """The config document with command-line overrides applied before validation."""
    document = load_document(args.config)
    if args.out is not None:
        document.setdefault("paths", {})["out_dir"] = str(args.out)
    if args.seed is not None:
        document["seed"] = args.seed
    if args.mode is not None:
        document.setdefault("da", {})["mode"] = args.mode
    if args.tau is not None:
        hours = parse_duration_hours(args.tau)
        if args.command == "assimilate":
            document.setdefault("da", {})["tau_hours"] = hours
        else:
            document.setdefault("dataset", {})["taus_hours"] = [hours]
    return parse_config(document)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(args)
        run_command(args.command, config, progress=args.progress)
    except QgmlError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
