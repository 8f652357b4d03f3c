import json
import logging
from pathlib import Path

import pytest

from qgml.config import (
    ExperimentConfig,
    load_document,
    parse_config,
    parse_duration_hours,
    recommended_std_b,
)
from qgml.constants import DEFAULT_STD_B, HOUR
from qgml.exceptions import ConfigurationError


def test_defaults_describe_the_desk_experiment() -> None:
    config = parse_config()
    assert config.model.grid.state_shape == (2, 20, 40)
    assert config.model.true_params().dt_step == pytest.approx(0.006)
    assert config.model.original_params().dt_step == pytest.approx(0.012)
    assert config.truth.n_trajectories == 3
    assert config.obs.n_per_batch == 50
    assert config.da.covariance.std_b == DEFAULT_STD_B
    assert config.member_days() == 120.0
    assert config.dataset.cell().tau == pytest.approx(24 * HOUR)


def test_sections_reject_unknown_keys() -> None:
    with pytest.raises(ConfigurationError, match="bogus"):
        parse_config({"obs": {"bogus": 1}})


def test_error_lists_the_field_path() -> None:
    with pytest.raises(ConfigurationError, match=r"obs\.obs_var"):
        parse_config({"obs": {"obs_var": -1.0}})


@pytest.mark.parametrize(
    ("document", "what"),
    [
        ({"dataset": {"taus_hours": [1.5]}}, "dataset tau"),
        ({"da": {"tau_hours": 0.1}}, "da tau"),
        ({"truth": {"store_every_minutes": 7}}, "truth storage period"),
        ({"truth": {"store_every_minutes": 90}}, "batch interval"),
    ],
)
def test_durations_must_be_whole_steps(document: dict, what: str) -> None:
    with pytest.raises(ConfigurationError, match=what):
        parse_config(document)


def test_leads_must_increase() -> None:
    with pytest.raises(ConfigurationError, match="increasing"):
        parse_config({"evaluation": {"leads_days": [2.0, 1.0]}})


@pytest.mark.parametrize(("n", "expected"), [(10, 0.16), (50, 0.08), (500, 0.022), (12, 0.16), (300, 0.022)])
def test_recommended_std_b(n: int, expected: float) -> None:
    assert recommended_std_b(n) == expected


def test_untuned_std_b_is_flagged(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING, logger="qgml.config"):
        parse_config({"obs": {"n_per_batch": 10}})
    assert "0.16" in caplog.text

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="qgml.config"):
        parse_config({"obs": {"n_per_batch": 10}, "da": {"covariance": {"std_b": 0.08}}})
        parse_config({"obs": {"n_per_batch": 10}, "da": {"retune_std_b": True}})
    assert caplog.text == ""


def test_retuned_std_b_follows_density() -> None:
    config = parse_config({"obs": {"n_per_batch": 500}, "da": {"retune_std_b": True}})
    assert config.effective_da().covariance.std_b == 0.022
    assert config.da.covariance.std_b == DEFAULT_STD_B
    assert parse_config().effective_da() == parse_config().da


def test_dataset_cell_overrides() -> None:
    config = parse_config({"dataset": {"taus_hours": [3.0, 24.0], "n_samples": [16, 128], "source": "truth"}})
    cell = config.dataset.cell(24.0, 128)
    assert (cell.tau_hours, cell.n_samples, cell.source) == (24.0, 128, "truth")
    assert config.dataset.cell().n_samples == 16


def test_documents_from_strings_and_files(tmp_path: Path) -> None:
    assert load_document('{"seed": 3}') == {"seed": 3}
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({"seed": 4}))
    assert parse_config(path).seed == 4
    assert parse_config(str(path)).seed == 4
    with pytest.raises(ConfigurationError, match="not found"):
        load_document(tmp_path / "missing.json")
    with pytest.raises(ConfigurationError, match="valid JSON"):
        load_document("{seed")
    with pytest.raises(ConfigurationError, match="object"):
        load_document("[1, 2]")


def test_snapshot_round_trips() -> None:
    config = parse_config({"seed": 9, "dataset": {"taus_hours": [6.0]}})
    assert ExperimentConfig.model_validate(config.snapshot()).snapshot() == config.snapshot()


@pytest.mark.parametrize(("text", "hours"), [("90m", 1.5), ("3h", 3.0), ("1d", 24.0), ("6", 6.0), (" 0.5h ", 0.5)])
def test_parse_duration(text: str, hours: float) -> None:
    assert parse_duration_hours(text) == pytest.approx(hours)


@pytest.mark.parametrize("text", ["", "3 weeks", "-1h", "0h", "h"])
def test_bad_durations(text: str) -> None:
    with pytest.raises(ConfigurationError):
        parse_duration_hours(text)
