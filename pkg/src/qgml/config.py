"""
Experiment configuration.

A single JSON document configures every stage. Sections are frozen pydantic models that reject
unknown keys; missing sections take the defaults of the desk-scale experiment.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, model_validator

from qgml.constants import (
    DAY,
    DEFAULT_BETA,
    DEFAULT_ENSEMBLE_SIZE,
    DEFAULT_OUT_DIR,
    DEFAULT_SKILL_LEADS_DAYS,
    HOUR,
    MEMBER_SEPARATION_DAYS,
    MIN_SPINUP_DAYS,
    PERTURBED_DEPTHS_M,
    PERTURBED_DT_MINUTES,
    PERTURBED_HILL_CENTER,
    REFERENCE_DEPTHS_M,
    REFERENCE_DT_MINUTES,
    REFERENCE_HILL_CENTER,
    RETUNED_STD_B,
    SPINUP_WINDOWS,
)
from qgml.dataset import DatasetConfig
from qgml.exceptions import ConfigurationError
from qgml.neural import Activation, Family, NetworkSpec, TrainConfig, conv_dense_template, dense_template
from qgml.observations import ObsConfig
from qgml.qg import GridSpec, QgParams
from qgml.var4d import DaConfig

logger = logging.getLogger(__name__)

_FROZEN = {"extra": "forbid", "frozen": True}


class SetupSection(BaseModel):
    """The three quantities the two model setups differ in."""

    depths_m: tuple[float, float]
    dt_minutes: float = Field(gt=0)
    hill_center_fraction: tuple[float, float]

    model_config = _FROZEN


class ModelSection(BaseModel):
    grid: GridSpec = Field(default_factory=GridSpec)
    beta: float = DEFAULT_BETA
    reference: SetupSection = SetupSection(
        depths_m=REFERENCE_DEPTHS_M,
        dt_minutes=REFERENCE_DT_MINUTES,
        hill_center_fraction=REFERENCE_HILL_CENTER,
    )
    perturbed: SetupSection = SetupSection(
        depths_m=PERTURBED_DEPTHS_M,
        dt_minutes=PERTURBED_DT_MINUTES,
        hill_center_fraction=PERTURBED_HILL_CENTER,
    )

    model_config = _FROZEN

    def _params(self, setup: SetupSection) -> QgParams:
        return QgParams.from_depths(
            setup.depths_m, setup.dt_minutes, setup.hill_center_fraction, grid=self.grid, beta=self.beta
        )

    def true_params(self) -> QgParams:
        return self._params(self.reference)

    def original_params(self) -> QgParams:
        return self._params(self.perturbed)


class TruthSection(BaseModel):
    n_trajectories: int = Field(default=3, ge=1)
    spinup_days: float = Field(default=MIN_SPINUP_DAYS, ge=0)
    length_windows: int = Field(default=120, ge=1)
    member_separation_days: float = Field(default=MEMBER_SEPARATION_DAYS, ge=0)
    store_every_minutes: float = Field(default=60.0, gt=0)
    climatology_check: bool = True

    model_config = _FROZEN


class DatasetSection(BaseModel):
    taus_hours: list[float] = Field(default_factory=lambda: [24.0], min_length=1)
    n_samples: list[int] = Field(default_factory=lambda: [128], min_length=1)
    source: Literal["analysis", "truth"] = "analysis"
    baseline: Literal["original", "none"] = "original"

    model_config = _FROZEN

    def cell(self, tau_hours: float | None = None, n_samples: int | None = None) -> DatasetConfig:
        return DatasetConfig(
            tau_hours=self.taus_hours[0] if tau_hours is None else tau_hours,
            n_samples=self.n_samples[0] if n_samples is None else n_samples,
            source=self.source,
            baseline=self.baseline,
        )


class ArchitectureSection(BaseModel):
    family: Family = "D"
    depth: int = Field(default=1, ge=0)
    width: int = Field(default=4, ge=1)
    activation: Activation = "linear"

    model_config = _FROZEN

    def spec(self, grid: GridSpec) -> NetworkSpec:
        builder = dense_template if self.family == "D" else conv_dense_template
        return builder(self.depth, self.width, self.activation, grid.state_shape)


class TrainSection(BaseModel):
    optimizer: TrainConfig = Field(default_factory=TrainConfig)
    architecture: ArchitectureSection = Field(default_factory=ArchitectureSection)
    sweep: bool = False

    model_config = _FROZEN


class EvaluationSection(BaseModel):
    leads_days: list[float] = Field(default_factory=lambda: list(DEFAULT_SKILL_LEADS_DAYS), min_length=1)
    ensemble_size: int = Field(default=DEFAULT_ENSEMBLE_SIZE, ge=1)
    spinup_windows: int = Field(default=SPINUP_WINDOWS, ge=0)

    model_config = _FROZEN

    @model_validator(mode="after")
    def _increasing(self) -> EvaluationSection:
        if any(b <= a for a, b in zip(self.leads_days, self.leads_days[1:], strict=False)):
            raise ValueError("leads_days must be strictly increasing")
        return self


class PathsSection(BaseModel):
    out_dir: Path = DEFAULT_OUT_DIR
    weights: Path | None = None

    model_config = _FROZEN


class ExperimentConfig(BaseModel):
    model: ModelSection = Field(default_factory=ModelSection)
    truth: TruthSection = Field(default_factory=TruthSection)
    obs: ObsConfig = Field(default_factory=ObsConfig)
    da: DaConfig = Field(default_factory=DaConfig)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    train: TrainSection = Field(default_factory=TrainSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    paths: PathsSection = Field(default_factory=PathsSection)
    seed: int = Field(default=0, ge=0)

    model_config = _FROZEN

    @model_validator(mode="after")
    def _consistent_durations(self) -> ExperimentConfig:
        dt_true = self.model.true_params().dt_step
        dt_orig = self.model.original_params().dt_step
        checks = [(h * HOUR, dt_orig, f"dataset tau {h:g} h") for h in self.dataset.taus_hours]
        checks += [
            (self.da.tau_hours * HOUR, dt_orig, f"da tau {self.da.tau_hours:g} h"),
            (self.obs.batch_interval_hours * HOUR, dt_orig, "observation batch interval"),
            (self.obs.first_batch_offset_hours * HOUR, dt_orig, "first batch offset"),
            (self.truth.store_every_minutes * HOUR / 60.0, dt_true, "truth storage period"),
            (self.obs.batch_interval_hours * 60.0, self.truth.store_every_minutes, "batch interval"),
        ]
        for duration, step, what in checks:
            ratio = duration / step
            if round(ratio) < 1 or not math.isclose(ratio, round(ratio), rel_tol=1e-9):
                raise ValueError(f"{what} is not a multiple of {step:.6g}")
        return self

    @property
    def out_dir(self) -> Path:
        return self.paths.out_dir

    def effective_da(self) -> DaConfig:
        """DA settings with b retuned to the observation density when requested."""
        if not self.da.retune_std_b:
            return self.da
        covariance = self.da.covariance.model_copy(update={"std_b": recommended_std_b(self.obs.n_per_batch)})
        return self.da.model_copy(update={"covariance": covariance})

    def member_days(self) -> float:
        return self.truth.length_windows * self.obs.window_hours / 24.0

    def snapshot(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


def recommended_std_b(n_per_batch: int) -> float:
    """Tuned background std for an observation density; nearest tuned density in log scale."""
    if n_per_batch in RETUNED_STD_B:
        return RETUNED_STD_B[n_per_batch]
    nearest = min(RETUNED_STD_B, key=lambda n: abs(math.log(n) - math.log(n_per_batch)))
    return RETUNED_STD_B[nearest]


def _warn_untuned_std_b(config: ExperimentConfig) -> None:
    n = config.obs.n_per_batch
    tuned = RETUNED_STD_B.get(n)
    if (
        tuned is not None
        and tuned != config.da.covariance.std_b
        and "std_b" not in config.da.covariance.model_fields_set
        and not config.da.retune_std_b
    ):
        logger.warning(
            f"{n} observations per batch with the default b = {config.da.covariance.std_b:g}; "
            f"the tuned value at this density is {tuned:g} (set da.covariance.std_b or "
            f"da.retune_std_b)"
        )


def load_document(document: str | Path | Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Read a config document (mapping, JSON string or JSON file path) into a plain dict."""
    if document is None:
        return {}
    if isinstance(document, Mapping):
        return json.loads(json.dumps(document, default=str))
    text = str(document)
    path = Path(text)
    if isinstance(document, Path) or (not text.lstrip().startswith("{") and path.suffix == ".json"):
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError("Config document must be a JSON object")
    return data


def parse_config(document: str | Path | Mapping[str, Any] | None = None) -> ExperimentConfig:
    """
    Validate an experiment document.

    Parameters:
        document: A mapping, a JSON string, or the path of a JSON file. None gives the defaults.

    Returns:
        ExperimentConfig: The validated configuration with defaults filled in.

    Raises:
        ConfigurationError: For malformed JSON, unknown keys or invalid values; the message lists
            every offending field path.
    """
    data = load_document(document)
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"Invalid config: {problems}") from e
    _warn_untuned_std_b(config)
    return config


_DURATION = re.compile(r"^\s*(\d+(?:\.\d*)?|\.\d+)\s*([mhd]?)\s*$")


def parse_duration_hours(text: str) -> float:
    """'90m', '3h', '1d' or a bare number of hours."""
    match = _DURATION.match(text)
    if match is None:
        raise ConfigurationError(f"Cannot read duration {text!r}; use e.g. 90m, 3h or 1d")
    value, unit = float(match.group(1)), match.group(2) or "h"
    hours = {"m": value / 60.0, "h": value, "d": value * DAY / HOUR}[unit]
    if hours <= 0:
        raise ConfigurationError(f"Duration must be positive, got {text!r}")
    return hours
