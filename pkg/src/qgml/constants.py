"""
Constants module for the qgml project.

This module centralizes project-wide constants: paths, the nondimensionalization of the
two-layer channel, the reference/perturbed setups, assimilation and training defaults,
and artifact format identifiers shared by the stages.
"""

from pathlib import Path

# --- Project Root ---
# Assuming constants.py is in src/qgml/
PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent

# --- Directories ---
DEFAULT_OUT_DIR = PROJECT_ROOT / "runs"
TRUTH_SUBDIR = "truth"
OBS_SUBDIR = "obs"
ANALYSIS_SUBDIR = "analysis"
DATASET_SUBDIR = "datasets"
WEIGHTS_SUBDIR = "weights"
SKILL_SUBDIR = "skill"
REPORT_SUBDIR = "report"
MANIFEST_SUBDIR = "manifests"


# --- Nondimensionalization ---
LENGTH_SCALE_M = 1.0e6
VELOCITY_SCALE_MS = 10.0
TIME_UNIT_SECONDS = LENGTH_SCALE_M / VELOCITY_SCALE_MS  # about 27.8 h
CORIOLIS_F0 = 1.0e-4
REDUCED_GRAVITY = 0.98

SECONDS_PER_HOUR = 3600.0
HOUR = SECONDS_PER_HOUR / TIME_UNIT_SECONDS
DAY = 24.0 * HOUR

# Relative slack when checking that a duration is a whole number of steps.
DURATION_RTOL = 1.0e-9


# --- Channel geometry ---
DEFAULT_NX = 40
DEFAULT_NY = 20
N_LAYERS = 2
DEFAULT_LX = 12.0
DEFAULT_LY = 6.3


# --- Reference (true) and perturbed (original) setups ---
REFERENCE_DEPTHS_M: tuple[float, float] = (6000.0, 4000.0)
PERTURBED_DEPTHS_M: tuple[float, float] = (5750.0, 4250.0)
REFERENCE_DT_MINUTES = 10.0
PERTURBED_DT_MINUTES = 20.0
DEFAULT_BETA = 1.6
HILL_AMPLITUDE = 1.0
HILL_WIDTH_FRACTION = 0.1  # of lx
# Hill centers as fractions of (lx, ly)
REFERENCE_HILL_CENTER: tuple[float, float] = (0.25, 2.0 / 3.0)
PERTURBED_HILL_CENTER: tuple[float, float] = (0.5, 0.5)

# Initial zonal jet
JET_SPEEDS: tuple[float, float] = (3.0, 1.0)
JET_WIDTH = 1.0
JET_PERTURBATION = 0.05
JET_PERTURBATION_WAVENUMBER = 3

MIN_SPINUP_DAYS = 30.0
MEMBER_SEPARATION_DAYS = 30.0
CLIMATOLOGY_MIN_SPAN_DAYS = 160.0  # ten wave periods of about 16 days
CLIMATOLOGY_TOLERANCE = 0.05


# --- Observations ---
DEFAULT_N_PER_BATCH = 50
DEFAULT_OBS_VAR = 0.1
BATCH_INTERVAL_HOURS = 2.0
FIRST_BATCH_OFFSET_HOURS = 1.0
WINDOW_HOURS = 24.0
BATCHES_PER_WINDOW = 12


# --- Background error covariance ---
DEFAULT_HORIZ_CORR_LEN = 0.6
DEFAULT_VERT_CORR = 0.2
DEFAULT_STD_B = 0.08
# Observation density -> tuned background std
RETUNED_STD_B: dict[int, float] = {10: 0.16, 50: DEFAULT_STD_B, 500: 0.022}
# Smallest correlation eigenvalue kept, relative to the largest; keeps C strictly positive definite
CORRELATION_EIGEN_FLOOR = 1.0e-10


# --- 4D-Var ---
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_GRADIENT_REDUCTION = 1.0e-3
DEFAULT_LBFGS_MEMORY = 10
SPINUP_WINDOWS = 8


# --- Neural corrector ---
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1.0e-7
PHASE1_EPOCHS = 1000
PHASE1_LR = 1.0e-3
PHASE2_EPOCHS = 1000
PHASE2_LR = 1.0e-4
FULL_BATCH_LIMIT = 128
MINI_BATCH_SIZE = 32
KERNEL_SIZE = 3

SWEEP_FAMILIES: tuple[str, ...] = ("D", "CD")
SWEEP_DEPTHS: tuple[int, ...] = (1, 4)
SWEEP_WIDTHS: tuple[int, ...] = (4, 8, 16)
SWEEP_ACTIVATIONS: tuple[str, ...] = ("linear", "relu")
SELECTION_LEAD_DAYS = 8.0


# --- Evaluation ---
DEFAULT_SKILL_LEADS_DAYS: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0)
DEFAULT_ENSEMBLE_SIZE = 16
PERTURBATION_FRACTION = 1.0e-4  # of variability, for doubling time
DOUBLING_R2_THRESHOLD = 0.98
DOUBLING_MIN_POINTS = 5


# --- Artifacts ---
TRAJECTORY_MAGIC = b"QGT1"
DATASET_MAGIC = b"QGD1"
TRAJECTORY_HEADER_FORMAT = "<4sIIIQdd"
DATASET_HEADER_FORMAT = "<4sQIIIQB"
DATASET_FOOTER_LENGTH_FORMAT = "<Q"
DATASET_SOURCE_FLAGS: dict[str, int] = {"analysis": 0, "truth": 1}

ANALYSIS_CSV_COLUMNS: list[str] = [
    "window_index",
    "analysis_rmse",
    "background_rmse",
    "final_cost",
    "iterations",
]
SKILL_CSV_COLUMNS: list[str] = ["lead_days", "fs_original", "fs_hybrid", "variability"]
REPORT_CSV_COLUMNS: list[str] = ["metric", "mean", "std", "n"]
SWEEP_CSV_COLUMNS: list[str] = [
    "network",
    "tau_hours",
    "n_samples",
    "nmse_increments",
    "nmse_truth",
    "fs_selection",
    "diverged",
    "flagged",
]


# --- Runtime ---
THREADS_ENV_VAR = "QGML_THREADS"
