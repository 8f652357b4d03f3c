import struct
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from qgml.artifacts import (
    WeightsFile,
    build_manifest,
    check_grid,
    decode_dataset,
    decode_trajectory,
    encode_dataset,
    encode_trajectory,
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
from qgml.constants import HOUR, SKILL_CSV_COLUMNS, TRAJECTORY_HEADER_FORMAT
from qgml.dataset import DatasetConfig, TrainingDatabase
from qgml.exceptions import ArtifactFormatError, DependencyError
from qgml.neural import (
    Normalizer,
    TrainingHistory,
    TrainResult,
    dense_template,
    init_params,
    param_count,
)
from qgml.observations import ObsConfig, generate_obs
from qgml.qg import GridSpec, Trajectory

from .conftest import SMALL_GRID

NORMALIZER = Normalizer(input_mean=0.1, input_std=2.0, output_mean=-0.3, output_std=0.5)


def _trajectory(rng: np.random.Generator, n: int = 4) -> Trajectory:
    return Trajectory(rng.standard_normal((n, *SMALL_GRID.state_shape)), 1.5, HOUR)


def _database(rng: np.random.Generator, n: int = 3) -> TrainingDatabase:
    shape = (n, *SMALL_GRID.state_shape)
    config = DatasetConfig(tau_hours=2.0, n_samples=n, source="truth")
    return TrainingDatabase(
        rng.standard_normal(shape), rng.standard_normal(shape), config, 0.012, "member_02", NORMALIZER
    )


def test_trajectory_file_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    traj = _trajectory(rng)
    path = write_trajectory(tmp_path / "truth" / "member_00.qgt", traj)
    loaded = read_trajectory(path)
    np.testing.assert_array_equal(loaded.psi, traj.psi)
    assert (loaded.t0, loaded.dt_between) == (traj.t0, traj.dt_between)
    assert loaded.source_id == "member_00"
    assert encode_trajectory(loaded) == path.read_bytes()


def test_trajectory_header_layout(rng: np.random.Generator) -> None:
    payload = encode_trajectory(_trajectory(rng, n=2))
    magic, nx, ny, n_layers, n_states, dt_between, t0 = struct.unpack_from(TRAJECTORY_HEADER_FORMAT, payload)
    assert magic == b"QGT1"
    assert (nx, ny, n_layers, n_states) == (8, 4, 2, 2)
    assert (dt_between, t0) == (HOUR, 1.5)
    assert len(payload) == struct.calcsize(TRAJECTORY_HEADER_FORMAT) + 2 * SMALL_GRID.size * 8


def test_corrupted_trajectories(rng: np.random.Generator) -> None:
    payload = encode_trajectory(_trajectory(rng))
    with pytest.raises(ArtifactFormatError, match="magic"):
        decode_trajectory(b"XXXX" + payload[4:])
    with pytest.raises(ArtifactFormatError):
        decode_trajectory(payload[:-8])
    with pytest.raises(ArtifactFormatError, match="truncated"):
        decode_trajectory(payload[:10])


def test_missing_artifact_names_its_producer(tmp_path: Path) -> None:
    with pytest.raises(DependencyError) as info:
        read_trajectory(tmp_path / "truth" / "member_00.qgt")
    assert info.value.producer == "truth"
    assert "qgml truth" in str(info.value)


def test_grid_check_of_loaded_trajectory(tmp_path: Path, rng: np.random.Generator) -> None:
    traj = _trajectory(rng)
    assert check_grid(traj, SMALL_GRID, tmp_path / "t.qgt") is traj
    with pytest.raises(ArtifactFormatError):
        check_grid(traj, GridSpec(), tmp_path / "t.qgt")


def test_observation_file_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    truth = Trajectory(rng.standard_normal((49, *SMALL_GRID.state_shape)), 3.0, HOUR)
    config = ObsConfig(n_per_batch=5, seed=1)
    db = generate_obs(truth, config, SMALL_GRID)
    loaded = read_obs(write_obs(tmp_path / "obs.jsonl", db), config)
    assert loaded.t0 == pytest.approx(db.t0)
    assert loaded.n_windows == db.n_windows == 2
    for original, restored in zip(db.batches, loaded.batches, strict=True):
        assert restored.time == original.time
        np.testing.assert_array_equal(restored.locations, original.locations)
        np.testing.assert_array_equal(restored.values, original.values)


def test_bad_observation_files(tmp_path: Path) -> None:
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"t": 1.0, "locs": [[0, 1.0, 1.0]], "vals": [0.5], "var": -1}\n')
    with pytest.raises(ArtifactFormatError, match="bad.jsonl:1"):
        read_obs(bad, ObsConfig())
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n")
    with pytest.raises(ArtifactFormatError):
        read_obs(empty, ObsConfig())


def test_dataset_file_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    db = _database(rng)
    loaded = read_dataset(write_dataset(tmp_path / "d.qgd", db))
    np.testing.assert_array_equal(loaded.inputs, db.inputs)
    np.testing.assert_array_equal(loaded.targets, db.targets)
    assert loaded.normalizer == NORMALIZER
    assert loaded.config.source == "truth"
    assert loaded.config.tau_hours == 2.0
    assert loaded.tau_steps == 6
    assert loaded.source_id == "member_02"


def test_dataset_records_interleave_inputs_and_targets(rng: np.random.Generator) -> None:
    db = _database(rng, n=2)
    payload = encode_dataset(db)
    head = struct.calcsize("<4sQIIIQB")
    first_target = np.frombuffer(payload, dtype="<f8", count=SMALL_GRID.size, offset=head + SMALL_GRID.size * 8)
    np.testing.assert_array_equal(first_target, db.targets[0].ravel())


def test_corrupted_datasets(rng: np.random.Generator) -> None:
    payload = encode_dataset(_database(rng))
    with pytest.raises(ArtifactFormatError, match="magic"):
        decode_dataset(b"QGT1" + payload[4:])
    with pytest.raises(ArtifactFormatError):
        decode_dataset(payload[:-20] + payload[-8:])
    flag_offset = struct.calcsize("<4sQIIIQ")
    with pytest.raises(ArtifactFormatError, match="source flag"):
        decode_dataset(payload[:flag_offset] + b"\x07" + payload[flag_offset + 1 :])
    tau_offset = struct.calcsize("<4sQIII")
    wrong_tau = struct.pack("<Q", 5)
    with pytest.raises(ArtifactFormatError, match="tau"):
        decode_dataset(payload[:tau_offset] + wrong_tau + payload[tau_offset + 8 :])


def _train_result(rng: np.random.Generator) -> tuple:
    spec = dense_template(1, 4, "linear", SMALL_GRID.state_shape)
    history = TrainingHistory(np.array([1.0, 0.6, 0.4]), np.array([0.9, 0.5, 0.7]), 1)
    return spec, TrainResult(init_params(spec, rng), NORMALIZER, history, 11)


def test_weights_file_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    spec, result = _train_result(rng)
    weights = WeightsFile.from_result(spec, result, tau_hours=24.0)
    loaded = read_weights(write_weights(tmp_path / "weights" / "corrector.json", weights))
    np.testing.assert_array_equal(loaded.flat_params(), result.params)
    assert loaded.spec.model_dump() == spec.model_dump()
    assert loaded.history.best_valid_mse == 0.5
    assert loaded.history.epochs == 3
    correction = loaded.correction()
    assert correction.tau == pytest.approx(24 * HOUR)
    assert correction.params.shape == (param_count(spec),)


def test_weights_that_do_not_fit_the_spec(rng: np.random.Generator) -> None:
    spec, result = _train_result(rng)
    weights = WeightsFile.from_result(spec, result, tau_hours=24.0)
    trimmed = weights.model_copy(update={"params": weights.params[:1]})
    with pytest.raises(ArtifactFormatError):
        trimmed.flat_params()


def test_missing_weights_point_to_training(tmp_path: Path) -> None:
    with pytest.raises(DependencyError) as info:
        read_weights(tmp_path / "nothing.json")
    assert info.value.producer == "train"


def test_invalid_weights_file(tmp_path: Path) -> None:
    path = tmp_path / "w.json"
    path.write_text('{"seed": 1}')
    with pytest.raises(ArtifactFormatError):
        read_weights(path)


def test_metrics_csv(tmp_path: Path) -> None:
    rows = [
        {"lead_days": 1.0, "fs_original": 0.1, "fs_hybrid": 0.05, "variability": 1.2, "extra": 3},
        {"lead_days": 2.0, "fs_original": 0.2, "fs_hybrid": 0.1, "variability": 1.2, "extra": 4},
    ]
    path = write_metrics_csv(tmp_path / "skill.csv", rows, SKILL_CSV_COLUMNS)
    frame = read_metrics_csv(path, SKILL_CSV_COLUMNS)
    assert list(frame.columns) == SKILL_CSV_COLUMNS
    assert frame["fs_hybrid"].tolist() == [0.05, 0.1]
    with pytest.raises(ArtifactFormatError):
        write_metrics_csv(tmp_path / "x.csv", pd.DataFrame({"lead_days": [1.0]}), SKILL_CSV_COLUMNS)
    with pytest.raises(ArtifactFormatError):
        read_metrics_csv(path, ["missing"])


def test_manifest_tracks_artifacts(tmp_path: Path) -> None:
    produced = tmp_path / "truth" / "member_00.qgt"
    produced.parent.mkdir()
    produced.write_bytes(b"abc")
    outside = tmp_path.parent / f"{tmp_path.name}-config.toml"
    outside.write_text("seed = 1\n")
    manifest = build_manifest(
        "truth", tmp_path, {"seed": 1, "dt": (1, 2)}, [produced], seeds={"truth": 5}, inputs=[outside]
    )
    assert list(manifest.artifacts) == ["truth/member_00.qgt"]
    assert manifest.config == {"seed": 1, "dt": [1, 2]}
    assert list(manifest.inputs) == [outside.as_posix()]

    loaded = read_manifest(write_manifest(tmp_path / "manifests" / "truth.json", manifest), producer="truth")
    assert loaded.model_dump() == manifest.model_dump()
    assert loaded.stale_artifacts(tmp_path) == []
    produced.write_bytes(b"abd")
    assert loaded.stale_artifacts(tmp_path) == ["truth/member_00.qgt"]
    produced.unlink()
    assert loaded.stale_artifacts(tmp_path) == ["truth/member_00.qgt"]
