"""
Simulated soundings of the stream function.

Each observation picks one layer and a point (x, y) in the channel; its value is the bilinear
interpolation of psi there, with the walls contributing psi = 0. H is assembled as a sparse
matrix so its transpose is exact by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse

from qgml.constants import (
    BATCH_INTERVAL_HOURS,
    DEFAULT_N_PER_BATCH,
    DEFAULT_OBS_VAR,
    DURATION_RTOL,
    FIRST_BATCH_OFFSET_HOURS,
    HOUR,
    WINDOW_HOURS,
)
from qgml.exceptions import GridMismatchError, ObservationError
from qgml.qg import GridSpec, ModelState, Trajectory

logger = logging.getLogger(__name__)


class ObsConfig(BaseModel):
    n_per_batch: int = Field(default=DEFAULT_N_PER_BATCH, ge=1)
    batch_interval_hours: float = Field(default=BATCH_INTERVAL_HOURS, gt=0)
    first_batch_offset_hours: float = Field(default=FIRST_BATCH_OFFSET_HOURS, gt=0)
    window_hours: float = Field(default=WINDOW_HOURS, gt=0)
    obs_var: float = Field(default=DEFAULT_OBS_VAR, gt=0)
    noise: bool = True
    layout: Literal["random", "dense"] = "random"
    seed: int = 0

    model_config = {"extra": "forbid", "frozen": True}

    @property
    def batch_offsets(self) -> np.ndarray:
        """Batch times relative to the window start, strictly inside (0, window]."""
        room = (self.window_hours - self.first_batch_offset_hours) / self.batch_interval_hours
        n = int(np.floor(room + DURATION_RTOL)) + 1
        return (self.first_batch_offset_hours + self.batch_interval_hours * np.arange(n)) * HOUR

    @property
    def window_length(self) -> float:
        return self.window_hours * HOUR


@dataclass(frozen=True)
class ObsBatch:
    """`locations` rows are (layer, x, y) in nondimensional coordinates."""

    time: float
    locations: np.ndarray
    values: np.ndarray
    obs_var: float

    def __post_init__(self) -> None:
        locs = np.array(self.locations, dtype=np.float64).reshape(-1, 3)
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(locs) != len(vals):
            raise ObservationError(f"{len(locs)} locations but {len(vals)} values")
        if not np.isfinite(vals).all():
            raise ObservationError(f"Non-finite observation values at t={self.time:.6g}")
        if self.obs_var <= 0:
            raise ObservationError("Observation error variance must be positive")
        locs.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ObsDatabase:
    batches: tuple[ObsBatch, ...]
    t0: float
    window_length: float
    batches_per_window: int
    provenance: dict[str, str | int] = field(default_factory=dict, compare=False)

    @property
    def n_windows(self) -> int:
        return len(self.batches) // self.batches_per_window

    def window_start(self, index: int) -> float:
        return self.t0 + index * self.window_length

    def window(self, index: int) -> tuple[ObsBatch, ...]:
        if not 0 <= index < self.n_windows:
            raise ObservationError(f"Window {index} outside database of {self.n_windows} windows")
        k = self.batches_per_window
        return self.batches[index * k : (index + 1) * k]


# --- Observation operator ---


def _check_locations(locations: np.ndarray, grid: GridSpec) -> np.ndarray:
    locs = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    layer, x, y = locs.T
    bad = (
        ~np.isin(layer, np.arange(grid.n_layers))
        | (x < 0.0)
        | (x > grid.lx)
        | (y < 0.0)
        | (y > grid.ly)
        | ~np.isfinite(locs).all(axis=1)
    )
    if bad.any():
        first = locs[np.argmax(bad)]
        raise ObservationError(f"{int(bad.sum())} location(s) outside the domain, e.g. {first.tolist()}")
    return locs


def observation_matrix(locations: np.ndarray, grid: GridSpec) -> sparse.csr_matrix:
    """Sparse H mapping the flattened (layer, y, x) state to the observed values."""
    locs = _check_locations(locations, grid)
    n_obs = len(locs)
    if n_obs == 0:
        return sparse.csr_matrix((0, grid.size))
    layer = locs[:, 0].astype(np.int64)
    gx = locs[:, 1] / grid.dx
    gy = locs[:, 2] / grid.dy  # row 0 is the southern wall
    fx = np.floor(gx)
    a = gx - fx
    i0 = fx.astype(np.int64) % grid.nx
    i1 = (i0 + 1) % grid.nx
    j0 = np.minimum(np.floor(gy), grid.ny).astype(np.int64)
    b = gy - j0
    j1 = j0 + 1

    rows, cols, weights = [], [], []
    obs_index = np.arange(n_obs)
    for j, i, w in (
        (j0, i0, (1 - a) * (1 - b)),
        (j0, i1, a * (1 - b)),
        (j1, i0, (1 - a) * b),
        (j1, i1, a * b),
    ):
        interior = (j >= 1) & (j <= grid.ny)
        rows.append(obs_index[interior])
        cols.append((layer[interior] * grid.ny + (j[interior] - 1)) * grid.nx + i[interior])
        weights.append(w[interior])
    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_obs, grid.size),
    )


def interpolate(state: ModelState, locations: np.ndarray, grid: GridSpec) -> np.ndarray:
    state.check_grid(grid)
    return observation_matrix(locations, grid) @ state.vector


def h_transpose(locations: np.ndarray, residuals: np.ndarray, grid: GridSpec) -> np.ndarray:
    """H^T r as a state-shaped field."""
    h = observation_matrix(locations, grid)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if len(residuals) != h.shape[0]:
        raise GridMismatchError(f"{len(residuals)} residuals for {h.shape[0]} locations")
    return (h.T @ residuals).reshape(grid.state_shape)


# --- Database generation ---


def dense_locations(grid: GridSpec) -> np.ndarray:
    """One observation at every interior node of both layers."""
    layer, row, col = np.meshgrid(
        np.arange(grid.n_layers), np.arange(1, grid.ny + 1), np.arange(grid.nx), indexing="ij"
    )
    return np.column_stack(
        [layer.ravel(), col.ravel() * grid.dx, row.ravel() * grid.dy]
    ).astype(np.float64)


def _draw_locations(rng: np.random.Generator, n: int, grid: GridSpec) -> np.ndarray:
    layer = rng.integers(0, grid.n_layers, size=n)
    x = rng.uniform(0.0, grid.lx, size=n)
    y = rng.uniform(0.0, grid.ly, size=n)
    return np.column_stack([layer, x, y]).astype(np.float64)


def generate_obs(
    truth: Trajectory, config: ObsConfig, grid: GridSpec, *, source_id: str = ""
) -> ObsDatabase:
    """
    Sample observation batches from a truth trajectory.

    Windows start at the first truth state. Every complete window gets one batch per offset;
    locations are redrawn at every batch and the noise is N(0, obs_var).

    Parameters:
        truth (Trajectory): Truth states; its spacing must divide the batch interval.
        config (ObsConfig): Density, timing, error variance and seed.
        grid (GridSpec): Channel geometry of the truth.
        source_id (str): Identifier of the truth trajectory, kept as provenance.

    Returns:
        ObsDatabase: Batches for every complete window.
    """
    if truth.psi.shape[1:] != grid.state_shape:
        raise GridMismatchError(f"Truth states {truth.psi.shape[1:]} do not match {grid.state_shape}")
    offsets = config.batch_offsets
    window = config.window_length
    span = truth.t_end - truth.t0
    last = offsets[-1]
    n_windows = 0
    if span >= last - DURATION_RTOL:
        n_windows = int(np.floor((span - last) / window + DURATION_RTOL)) + 1
    if n_windows < 1:
        raise ObservationError(
            f"Truth spans {span:.4g} time units, shorter than one window of batches ({offsets[-1]:.4g})"
        )

    rng = np.random.default_rng(config.seed)
    dense = dense_locations(grid) if config.layout == "dense" else None
    std = np.sqrt(config.obs_var)
    batches = []
    for w in range(n_windows):
        for offset in offsets:
            time = truth.t0 + w * window + offset
            state = truth[truth.index_of(time)]
            locs = dense if dense is not None else _draw_locations(rng, config.n_per_batch, grid)
            values = observation_matrix(locs, grid) @ state.vector
            if config.noise:
                values = values + std * rng.standard_normal(len(values))
            batches.append(ObsBatch(time, locs, values, config.obs_var))
    logger.info(f"Generated {len(batches)} observation batches over {n_windows} windows")
    return ObsDatabase(
        batches=tuple(batches),
        t0=truth.t0,
        window_length=window,
        batches_per_window=len(offsets),
        provenance={"truth_id": source_id or truth.source_id, "seed": config.seed},
    )
