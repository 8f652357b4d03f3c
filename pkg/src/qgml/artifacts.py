"""
Artifact persistence.

Binary trajectories (QGT1) and training databases (QGD1) are little-endian f64 with a fixed
struct header. Observations are JSON lines, network weights a pydantic-validated JSON document,
metrics pandas CSV. Every write goes through a temporary file and an atomic rename, and every
stage records what it produced in a RunManifest.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from qgml import __version__
from qgml.constants import (
    DATASET_FOOTER_LENGTH_FORMAT,
    DATASET_HEADER_FORMAT,
    DATASET_MAGIC,
    DATASET_SOURCE_FLAGS,
    HOUR,
    TRAJECTORY_HEADER_FORMAT,
    TRAJECTORY_MAGIC,
)
from qgml.dataset import DatasetConfig, TrainingDatabase
from qgml.exceptions import ArtifactFormatError, DependencyError
from qgml.neural import NetworkCorrection, NetworkParams, NetworkSpec, Normalizer, TrainResult, unpack
from qgml.observations import ObsBatch, ObsConfig, ObsDatabase
from qgml.qg import GridSpec, Trajectory
from qgml.utils import atomic_write_bytes, atomic_write_text, file_digest

logger = logging.getLogger(__name__)

_F64 = np.dtype("<f8")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(str(path), producer)
    return path


# --- Trajectories ---


def encode_trajectory(traj: Trajectory) -> bytes:
    n_states, n_layers, ny, nx = traj.psi.shape
    header = struct.pack(
        TRAJECTORY_HEADER_FORMAT, TRAJECTORY_MAGIC, nx, ny, n_layers, n_states, traj.dt_between, traj.t0
    )
    return header + traj.psi.astype(_F64, copy=False).tobytes(order="C")


def decode_trajectory(payload: bytes, source_id: str = "") -> Trajectory:
    size = struct.calcsize(TRAJECTORY_HEADER_FORMAT)
    if len(payload) < size:
        raise ArtifactFormatError(f"Trajectory file truncated: {len(payload)} bytes, header needs {size}")
    magic, nx, ny, n_layers, n_states, dt_between, t0 = struct.unpack_from(TRAJECTORY_HEADER_FORMAT, payload)
    if magic != TRAJECTORY_MAGIC:
        raise ArtifactFormatError(f"Bad trajectory magic {magic!r}, expected {TRAJECTORY_MAGIC!r}")
    expected = n_states * n_layers * ny * nx * _F64.itemsize
    if len(payload) - size != expected:
        raise ArtifactFormatError(
            f"Trajectory body has {len(payload) - size} bytes, header promises {expected}"
        )
    psi = np.frombuffer(payload, dtype=_F64, offset=size).reshape(n_states, n_layers, ny, nx)
    return Trajectory(psi.astype(np.float64), t0, dt_between, source_id)


def write_trajectory(path: Path, traj: Trajectory) -> Path:
    atomic_write_bytes(path, encode_trajectory(traj))
    logger.info(f"Wrote trajectory of {len(traj)} states to {path}")
    return path


def read_trajectory(path: Path, *, producer: str = "truth") -> Trajectory:
    return decode_trajectory(_require(path, producer).read_bytes(), source_id=path.stem)


# --- Observations ---


class ObsRecord(BaseModel):
    """One JSON line of an observation file."""

    t: float
    locs: list[tuple[float, float, float]]
    vals: list[float]
    var: float = Field(gt=0)

    model_config = {"extra": "forbid"}


def write_obs(path: Path, db: ObsDatabase) -> Path:
    lines = [
        ObsRecord(t=b.time, locs=b.locations.tolist(), vals=b.values.tolist(), var=b.obs_var).model_dump_json()
        for b in db.batches
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")
    logger.info(f"Wrote {len(lines)} observation batches to {path}")
    return path


def read_obs(path: Path, config: ObsConfig, *, producer: str = "obs") -> ObsDatabase:
    """
    Read an observation file back into windows.

    The file carries only batches; window length and batches per window come from `config`, and
    the first window starts one first-batch offset before the first batch.
    """
    batches = []
    text = _require(path, producer).read_text(encoding="utf-8")
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = ObsRecord.model_validate_json(line)
        except ValidationError as e:
            raise ArtifactFormatError(f"{path}:{number}: invalid observation record", e) from e
        batches.append(ObsBatch(record.t, np.array(record.locs), np.array(record.vals), record.var))
    if not batches:
        raise ArtifactFormatError(f"{path} holds no observation batches")
    offsets = config.batch_offsets
    return ObsDatabase(
        batches=tuple(batches),
        t0=batches[0].time - float(offsets[0]),
        window_length=config.window_length,
        batches_per_window=len(offsets),
        provenance={"file": path.name},
    )


# --- Training databases ---


class DatasetFooter(BaseModel):
    normalizer: Normalizer | None = None
    dt_step: float
    source_id: str = ""
    tau_hours: float
    baseline: Literal["original", "none"] = "original"

    model_config = {"extra": "forbid"}


def encode_dataset(db: TrainingDatabase) -> bytes:
    n, n_layers, ny, nx = db.inputs.shape
    header = struct.pack(
        DATASET_HEADER_FORMAT,
        DATASET_MAGIC,
        n,
        nx,
        ny,
        n_layers,
        db.tau_steps,
        DATASET_SOURCE_FLAGS[db.config.source],
    )
    records = np.stack([db.inputs, db.targets], axis=1).astype(_F64, copy=False)
    footer = DatasetFooter(
        normalizer=db.normalizer,
        dt_step=db.dt_step,
        source_id=db.source_id,
        tau_hours=db.config.tau_hours,
        baseline=db.config.baseline,
    ).model_dump_json().encode("utf-8")
    return header + records.tobytes(order="C") + footer + struct.pack(DATASET_FOOTER_LENGTH_FORMAT, len(footer))


def decode_dataset(payload: bytes) -> TrainingDatabase:
    head = struct.calcsize(DATASET_HEADER_FORMAT)
    tail = struct.calcsize(DATASET_FOOTER_LENGTH_FORMAT)
    if len(payload) < head + tail:
        raise ArtifactFormatError(f"Dataset file truncated: {len(payload)} bytes")
    magic, n, nx, ny, n_layers, tau_steps, flag = struct.unpack_from(DATASET_HEADER_FORMAT, payload)
    if magic != DATASET_MAGIC:
        raise ArtifactFormatError(f"Bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}")
    sources = {v: k for k, v in DATASET_SOURCE_FLAGS.items()}
    if flag not in sources:
        raise ArtifactFormatError(f"Unknown dataset source flag {flag}")
    (footer_len,) = struct.unpack_from(DATASET_FOOTER_LENGTH_FORMAT, payload, len(payload) - tail)
    body = n * 2 * n_layers * ny * nx * _F64.itemsize
    if head + body + footer_len + tail != len(payload):
        raise ArtifactFormatError(
            f"Dataset size {len(payload)} does not match header ({n} samples) and footer ({footer_len} bytes)"
        )
    try:
        footer = DatasetFooter.model_validate_json(payload[head + body : head + body + footer_len])
    except ValidationError as e:
        raise ArtifactFormatError("Dataset footer is not valid JSON metadata", e) from e
    records = np.frombuffer(payload, dtype=_F64, count=body // _F64.itemsize, offset=head)
    records = records.reshape(n, 2, n_layers, ny, nx).astype(np.float64)
    config = DatasetConfig(
        tau_hours=footer.tau_hours, n_samples=max(n, 1), source=sources[flag], baseline=footer.baseline
    )
    db = TrainingDatabase(
        records[:, 0], records[:, 1], config, footer.dt_step, footer.source_id, footer.normalizer
    )
    if n and db.tau_steps != tau_steps:
        raise ArtifactFormatError(f"Header says tau = {tau_steps} steps, footer gives {db.tau_steps}")
    return db


def write_dataset(path: Path, db: TrainingDatabase) -> Path:
    atomic_write_bytes(path, encode_dataset(db))
    logger.info(f"Wrote {db.config.source} database of {len(db)} pairs to {path}")
    return path


def read_dataset(path: Path, *, producer: str = "dataset") -> TrainingDatabase:
    return decode_dataset(_require(path, producer).read_bytes())


# --- Network weights ---


class LayerWeights(BaseModel):
    weights: list[float]
    bias: list[float]

    model_config = {"extra": "forbid"}


class HistorySummary(BaseModel):
    epochs: int
    best_epoch: int
    best_valid_mse: float
    final_train_mse: float

    model_config = {"extra": "forbid"}


class WeightsFile(BaseModel):
    spec: NetworkSpec
    normalizer: Normalizer
    params: list[LayerWeights]
    seed: int
    tau_hours: float = Field(gt=0)
    baseline: Literal["original", "none"] = "original"
    history: HistorySummary | None = None

    model_config = {"extra": "forbid"}

    @classmethod
    def from_result(
        cls,
        spec: NetworkSpec,
        result: TrainResult,
        tau_hours: float,
        baseline: Literal["original", "none"] = "original",
    ) -> WeightsFile:
        layers = [
            LayerWeights(weights=w.ravel().tolist(), bias=b.tolist())
            for w, b in filter(None, unpack(spec, result.params))
        ]
        history = result.history
        summary = HistorySummary(
            epochs=len(history.valid_mse),
            best_epoch=history.best_epoch,
            best_valid_mse=history.best_valid_mse,
            final_train_mse=float(history.train_mse[-1]),
        )
        return cls(
            spec=spec,
            normalizer=result.normalizer,
            params=layers,
            seed=result.seed,
            tau_hours=tau_hours,
            baseline=baseline,
            history=summary,
        )

    def flat_params(self) -> NetworkParams:
        chunks = [np.concatenate([np.asarray(layer.weights), np.asarray(layer.bias)]) for layer in self.params]
        params = np.concatenate(chunks) if chunks else np.zeros(0)
        # unpack checks the total length against the layer layout
        try:
            unpack(self.spec, params)
        except Exception as e:
            raise ArtifactFormatError("Weights do not fit the stored network spec", e) from e
        return params

    def correction(self) -> NetworkCorrection:
        return NetworkCorrection(self.spec, self.flat_params(), self.normalizer, self.tau_hours * HOUR)


def write_weights(path: Path, weights: WeightsFile) -> Path:
    atomic_write_text(path, weights.model_dump_json(indent=2))
    logger.info(f"Wrote weights of {weights.spec.name} to {path}")
    return path


def read_weights(path: Path, *, producer: str = "train") -> WeightsFile:
    text = _require(path, producer).read_text(encoding="utf-8")
    try:
        return WeightsFile.model_validate_json(text)
    except ValidationError as e:
        raise ArtifactFormatError(f"{path} is not a valid weights file", e) from e


# --- Metrics ---


def write_metrics_csv(path: Path, rows: pd.DataFrame | Iterable[Mapping[str, Any]], columns: list[str]) -> Path:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ArtifactFormatError(f"Metrics for {path.name} lack columns {missing}")
    buffer = io.StringIO()
    frame[columns].to_csv(buffer, index=False)
    atomic_write_text(path, buffer.getvalue())
    logger.info(f"Wrote {len(frame)} metric rows to {path}")
    return path


def read_metrics_csv(path: Path, columns: list[str] | None = None, *, producer: str = "report") -> pd.DataFrame:
    try:
        frame = pd.read_csv(_require(path, producer))
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactFormatError(f"{path} is not a readable CSV", e) from e
    missing = [c for c in columns or [] if c not in frame.columns]
    if missing:
        raise ArtifactFormatError(f"{path} lacks columns {missing}")
    return frame


# --- Manifests ---


class RunManifest(BaseModel):
    """What a stage ran with and what it produced, relative to the output directory."""

    stage: str
    code_version: str = __version__
    config: dict[str, Any]
    seeds: dict[str, int] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    artifacts: dict[str, str] = Field(default_factory=dict)

    model_config = {"extra": "forbid"}

    def stale_artifacts(self, root: Path) -> list[str]:
        """Recorded artifacts that are missing or whose content changed."""
        return [
            name
            for name, digest in self.artifacts.items()
            if not (root / name).exists() or file_digest(root / name) != digest
        ]


def _manifest_key(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix() if path.is_relative_to(root) else path.as_posix()


def build_manifest(
    stage: str,
    root: Path,
    config: Mapping[str, Any],
    produced: Iterable[Path],
    *,
    seeds: Mapping[str, int] | None = None,
    inputs: Iterable[Path] = (),
) -> RunManifest:
    return RunManifest(
        stage=stage,
        config=json.loads(json.dumps(config)),
        seeds=dict(seeds or {}),
        inputs={_manifest_key(p, root): file_digest(p) for p in sorted(inputs)},
        artifacts={_manifest_key(p, root): file_digest(p) for p in sorted(produced)},
    )


def write_manifest(path: Path, manifest: RunManifest) -> Path:
    atomic_write_text(path, manifest.model_dump_json(indent=2))
    logger.info(f"Wrote {manifest.stage} manifest with {len(manifest.artifacts)} artifacts to {path}")
    return path


def read_manifest(path: Path, *, producer: str) -> RunManifest:
    text = _require(path, producer).read_text(encoding="utf-8")
    try:
        return RunManifest.model_validate_json(text)
    except ValidationError as e:
        raise ArtifactFormatError(f"{path} is not a valid run manifest", e) from e


def check_grid(traj: Trajectory, grid: GridSpec, path: Path) -> Trajectory:
    if traj.psi.shape[1:] != grid.state_shape:
        raise ArtifactFormatError(f"{path} holds states {traj.psi.shape[1:]}, configured grid is {grid.state_shape}")
    return traj
