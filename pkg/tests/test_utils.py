from pathlib import Path

import pytest
from hypothesis import given
from hypothesis.strategies import integers, text

from qgml.exceptions import ConfigurationError, HorizonError
from qgml.utils import atomic_write_text, derive_seed, file_digest, whole_steps, worker_count


def test_derived_seeds_are_stable_and_distinct() -> None:
    assert derive_seed(0, "obs/member_00") == derive_seed(0, "obs/member_00")
    assert derive_seed(0, "obs/member_00") != derive_seed(0, "obs/member_01")
    assert derive_seed(0, "train") != derive_seed(1, "train")
    assert 0 <= derive_seed(5, "train") < 2**63


@pytest.mark.parametrize(("duration", "step", "expected"), [(0.864, 0.012, 72), (0.036, 0.006, 6), (0.0, 0.5, 0)])
def test_whole_steps(duration: float, step: float, expected: int) -> None:
    assert whole_steps(duration, step) == expected


@pytest.mark.parametrize(("duration", "step"), [(0.01, 0.012), (-0.024, 0.012), (1.0, 0.0)])
def test_fractional_steps_raise(duration: float, step: float) -> None:
    with pytest.raises(HorizonError):
        whole_steps(duration, step)


def test_worker_count_respects_the_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("QGML_THREADS", "2")
    assert worker_count() == 2
    assert worker_count(8) == 2
    assert worker_count(1) == 1
    monkeypatch.setenv("QGML_THREADS", "many")
    with pytest.raises(ConfigurationError):
        worker_count()


def test_atomic_write_leaves_no_temporary_files(tmp_path: Path) -> None:
    path = atomic_write_text(tmp_path / "nested" / "out.txt", "psi")
    assert path.read_text() == "psi"
    assert [p.name for p in path.parent.iterdir()] == ["out.txt"]
    assert file_digest(path) == file_digest(atomic_write_text(tmp_path / "copy.txt", "psi"))


@given(master=integers(min_value=0, max_value=2**31), label=text(alphabet="abcdefxyz_/0123456789", min_size=1, max_size=20))
def test_seed_derivation_ignores_other_labels(master: int, label: str) -> None:
    before = derive_seed(master, label)
    derive_seed(master, label + "/other")
    assert derive_seed(master, label) == before
    assert derive_seed(master, label) != derive_seed(master, label + "/other")
