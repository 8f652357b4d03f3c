import hashlib
import logging
import os
import tempfile
from pathlib import Path

from qgml.constants import DURATION_RTOL, THREADS_ENV_VAR
from qgml.exceptions import ConfigurationError, HorizonError

logger = logging.getLogger(__name__)


def derive_seed(master_seed: int, label: str) -> int:
    """
    Derive a stage seed from the master seed and a stage label.

    The seed is the first 8 bytes of sha256("{master}:{label}"), so adding a new label never
    shifts the randomness of existing ones.

    Parameters:
        master_seed (int): Experiment master seed.
        label (str): Stage label, e.g. "obs/3" or "train/D-1x4-linear".

    Returns:
        int: A non-negative 63-bit seed usable by numpy.random.default_rng.
    """
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def whole_steps(duration: float, step: float, what: str = "duration") -> int:
    """Return duration/step as an int, raising HorizonError when it is not a whole number."""
    if step <= 0:
        raise HorizonError(f"Step must be positive, got {step}")
    ratio = duration / step
    n = round(ratio)
    if n < 0 or abs(ratio - n) > DURATION_RTOL * max(1.0, abs(ratio)):
        raise HorizonError(f"{what} {duration:.6g} is not a non-negative multiple of {step:.6g}")
    return int(n)


def worker_count(requested: int | None = None) -> int:
    """Number of parallel workers, capped by the QGML_THREADS environment variable."""
    available = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV_VAR)
    if cap is not None:
        try:
            available = max(1, int(cap))
        except ValueError as e:
            raise ConfigurationError(f"{THREADS_ENV_VAR} must be an integer, got {cap!r}") from e
    if requested is None:
        return available
    return max(1, min(requested, available))


def file_digest(path: Path) -> str:
    """Hex sha256 of a file's content."""
    sha = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def atomic_write_bytes(path: Path, payload: bytes) -> Path:
    """
    Write bytes to `path` through a temporary sibling file and an atomic rename.

    Readers never observe a partially written artifact; the parent directory is created on demand.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    tmp_path = Path(tmp_name)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        tmp_path.replace(path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {len(payload)} bytes to {path}")
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
