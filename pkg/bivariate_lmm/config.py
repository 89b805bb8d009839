"""Configuration constants for bivariate linear mixed model fitting."""

from bivariate_lmm import __version__

# Measurement grid
DEFAULT_OCCASION_SPACING = 4.0  # months between scheduled visits
DEFAULT_TIME_ORIGIN = 0.0
DEFAULT_TAU = 4.0  # change point of the piecewise slope, months
GRID_TOLERANCE = 1e-6  # fraction of the occasion spacing

# Design terms understood by the design builder
PIECEWISE_TERMS = ("T1", "T2")
KNOWN_TERMS = ("T", "T1", "T2")
INTERCEPT_TERM = "Intercept"

# Default marker labels (first marker column -> M1, second -> M2)
DEFAULT_MARKER_NAMES = ("M1", "M2")

# Optimizer settings
DEFAULT_MAX_ITERATIONS = 500
DEFAULT_GRADIENT_TOLERANCE = 1e-6
DEFAULT_OBJECTIVE_TOLERANCE = 1e-10
DEFAULT_NEWTON_STEPS = 20
MAX_STEP_HALVINGS = 30
FINITE_DIFFERENCE_STEP = 1e-5  # scaled by (1 + |theta_j|)
START_RHO = 0.1
START_FRACTION = 0.1

# Numerical guards
CONDITION_LIMIT = 1e12
BOUNDARY_FRACTION = 1e-8  # of the marker's response variance
RHO_IDENTIFIABILITY = 0.05
NESTING_SLACK = 1e-6  # log-likelihood units

# Reporting
SIGNIFICANT_DIGITS = 6
CONFIDENCE_LEVEL = 0.95
INTERVAL_METHOD = "Wald (log/atanh scale)"

# Exit codes
EXIT_SUCCESS = 0
EXIT_RECOVERY_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NOT_CONVERGED = 3
EXIT_INTERNAL_ERROR = 4

# Simulation
DEFAULT_REPLICATES = 20
DEFAULT_SUBJECTS = 300
DEFAULT_OCCASIONS = (1, 2, 3, 4, 5, 6)
RECOVERY_TOLERANCE_SE = 3.0

# Truth presets. Marker 1 is the log viral load change, marker 2 the CD4 change.
TRUTH_PRESETS = {
    "ar1-error": {
        "beta": [-0.49, 0.005, 24.0, 4.0],
        "G": None,
        "serial": {"C": [[1.54, -7.00], [-7.00, 195.0]], "rho": 0.91},
        "errors": [0.15, 77.0],
        "model": {
            "name": "bivariate AR(1)",
            "random_effects": "none",
            "residual": "ar1_error",
            "independent": False,
            "method": "REML",
        },
    },
    "random-slopes": {
        "beta": [-0.49, 0.005, 24.0, 4.0],
        "G": [
            [0.04, -0.002, -0.4, -0.02],
            [-0.002, 0.0025, 0.01, -0.03],
            [-0.4, 0.01, 100.0, 2.0],
            [-0.02, -0.03, 2.0, 4.0],
        ],
        "serial": None,
        "errors": [0.3, 900.0],
        "model": {
            "name": "bivariate random slopes",
            "random_effects": "slopes",
            "residual": "grouped_diagonal",
            "independent": False,
            "method": "REML",
        },
    },
}
DEFAULT_PRESET = "ar1-error"

# Report header
REPORT_TITLE = f"bivariate-lmm {__version__}"
