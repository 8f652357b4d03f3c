"""
Training databases of (state, model-error proxy) pairs.

From a trajectory stored every `dt_between`, a sampling period tau = n * dt_between keeps the
states at indices 0, n, 2n, ... and pairs each with the difference between the next kept state
and the original model's forecast of it over tau. Analysis trajectories (one state per window)
give increment-based databases, truth trajectories give exact ones.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from qgml.constants import HOUR
from qgml.exceptions import ConfigurationError, DatasetTooShortError, GridMismatchError
from qgml.neural import Normalizer
from qgml.qg import ModelState, QgParams, Trajectory, resolvent
from qgml.utils import whole_steps

logger = logging.getLogger(__name__)


class DatasetConfig(BaseModel):
    tau_hours: float = Field(default=24.0, gt=0)
    n_samples: int = Field(default=128, ge=1)
    source: Literal["analysis", "truth"] = "analysis"
    # "none" makes the target the state itself, for networks that replace the model
    baseline: Literal["original", "none"] = "original"

    model_config = {"extra": "forbid", "frozen": True}

    @property
    def tau(self) -> float:
        return self.tau_hours * HOUR


@dataclass(frozen=True)
class SamplePair:
    input: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class TrainingDatabase:
    inputs: np.ndarray
    targets: np.ndarray
    config: DatasetConfig
    dt_step: float
    source_id: str = ""
    normalizer: Normalizer | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.inputs.shape != self.targets.shape:
            raise GridMismatchError(f"Inputs {self.inputs.shape} and targets {self.targets.shape} differ")
        for name in ("inputs", "targets"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def pairs(self) -> list[SamplePair]:
        return [SamplePair(x, y) for x, y in zip(self.inputs, self.targets, strict=True)]

    @property
    def tau_steps(self) -> int:
        return whole_steps(self.config.tau, self.dt_step, "sampling period")

    def with_normalizer(self, normalizer: Normalizer) -> TrainingDatabase:
        return replace(self, normalizer=normalizer)


def sampling_indices(n_stored: int, stride: int) -> range:
    """Stored-state indices kept at sampling stride n: 0, n, 2n, ..."""
    if stride < 1:
        raise ValueError(f"Stride must be at least 1, got {stride}")
    return range(0, n_stored, stride)


def max_samples(n_states: int, stride: int) -> int:
    """Largest n_samples a trajectory of n_states supports: every pair needs the state one stride later."""
    return max(0, (n_states - 1) // stride)


def build_database(
    traj: Trajectory,
    original_model: QgParams,
    config: DatasetConfig,
    *,
    progress: bool = False,
) -> TrainingDatabase:
    """
    Pair kept states with the model-error proxy accumulated over tau.

    Parameters:
        traj (Trajectory): Analyses at window spacing, or truth at that spacing or finer.
        original_model (QgParams): The model whose error is learned.
        config (DatasetConfig): tau, n_samples, source and baseline.

    Returns:
        TrainingDatabase: n_samples pairs of a kept state and the error of its tau forecast.
    """
    if traj.psi.shape[1:] != original_model.grid.state_shape:
        raise GridMismatchError(
            f"Trajectory states {traj.psi.shape[1:]} do not match {original_model.grid.state_shape}"
        )
    tau = config.tau
    whole_steps(tau, original_model.dt_step, "sampling period")
    stride = whole_steps(tau, traj.dt_between, "sampling period") if len(traj) > 1 else 0
    if stride < 1:
        raise DatasetTooShortError(config.n_samples, 0)
    feasible = max_samples(len(traj), stride)
    if config.n_samples > feasible:
        raise DatasetTooShortError(config.n_samples, feasible)

    last = stride * config.n_samples
    inputs = traj.psi[0:last:stride]
    following = traj.psi[stride : last + 1 : stride]
    if config.baseline == "none":
        targets = np.array(following)
    else:
        targets = np.empty_like(inputs)
        for k in tqdm(range(config.n_samples), desc="Re-forecasting", disable=not progress):
            start = ModelState(inputs[k], traj.t0 + k * tau)
            targets[k] = following[k] - resolvent(start, original_model, tau).psi
    logger.info(
        f"Built {config.source} database '{traj.source_id}': {config.n_samples} pairs, "
        f"tau={config.tau_hours:g} h (stride {stride})"
    )
    return TrainingDatabase(inputs, targets, config, original_model.dt_step, traj.source_id)


def build_full_database(
    traj: Trajectory, original_model: QgParams, config: DatasetConfig, *, progress: bool = False
) -> TrainingDatabase:
    """build_database with n_samples set to the largest size the trajectory supports."""
    stride = whole_steps(config.tau, traj.dt_between, "sampling period") if len(traj) > 1 else 0
    n = max_samples(len(traj), stride) if stride else 0
    if n < 1:
        raise DatasetTooShortError(1, n)
    return build_database(
        traj, original_model, config.model_copy(update={"n_samples": n}), progress=progress
    )


def head(db: TrainingDatabase, n_samples: int) -> TrainingDatabase:
    """The first n_samples pairs, i.e. what build_database gives for that size."""
    if n_samples > len(db):
        raise DatasetTooShortError(n_samples, len(db))
    return replace(
        db,
        inputs=db.inputs[:n_samples],
        targets=db.targets[:n_samples],
        config=db.config.model_copy(update={"n_samples": n_samples}),
    )


def assign_roles(trajectory_ids: Sequence[str]) -> dict[str, list[str]]:
    """Positional split: first trajectory trains, second validates, the rest test."""
    ids = list(trajectory_ids)
    if len(ids) < 3:
        raise ConfigurationError(f"Need at least 3 trajectories for train/valid/test, got {len(ids)}")
    return {"train": ids[:1], "valid": ids[1:2], "test": ids[2:]}


def compute_normalizer(db: TrainingDatabase) -> Normalizer:
    if len(db) == 0:
        raise ValueError("Cannot normalize an empty database")
    return Normalizer.fit(db.inputs, db.targets)


def normalized(db: TrainingDatabase, normalizer: Normalizer) -> TrainingDatabase:
    """The database expressed in the normalizer's units."""
    return replace(
        db,
        inputs=normalizer.normalize_input(db.inputs),
        targets=normalizer.normalize_output(db.targets),
        normalizer=None,
    )
