"""Data models for bivariate linear mixed models."""

from enum import Enum, IntEnum
from typing import NamedTuple, Optional, Tuple

import numpy as np

from bivariate_lmm.config import (
    DEFAULT_GRADIENT_TOLERANCE,
    DEFAULT_MARKER_NAMES,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_NEWTON_STEPS,
    DEFAULT_OBJECTIVE_TOLERANCE,
    DEFAULT_OCCASION_SPACING,
    DEFAULT_TAU,
    DEFAULT_TIME_ORIGIN,
    INTERCEPT_TERM,
    KNOWN_TERMS,
    PIECEWISE_TERMS,
)
from bivariate_lmm.errors import InvalidArgumentError


class Marker(IntEnum):
    """Marker indicator (0 for the first marker column, 1 for the second)."""
    M1 = 0
    M2 = 1


class RandomEffects(str, Enum):
    """Random-effects choice of a model."""
    NONE = "none"
    SLOPES = "slopes"


class ResidualVariant(str, Enum):
    """Residual structure variant."""
    GROUPED_DIAGONAL = "grouped_diagonal"
    AR1_ERROR = "ar1_error"
    AR1 = "ar1"

    @property
    def has_serial(self):
        return self is not ResidualVariant.GROUPED_DIAGONAL

    @property
    def has_error(self):
        return self is not ResidualVariant.AR1


class Method(str, Enum):
    """Likelihood used for estimation."""
    ML = "ML"
    REML = "REML"


class LongRecord(NamedTuple):
    """One observation of one marker for one subject at one occasion."""
    subject_id: str
    marker: Marker
    time: float
    occasion: int
    response: float


class StackedDataset(NamedTuple):
    """Long-format bivariate dataset, records in canonical order.

    Canonical order is subject, then marker, then occasion. Build instances
    with ``bivariate_lmm.data.make_dataset`` so the invariants are checked.
    """
    records: Tuple[LongRecord, ...]
    occasion_spacing: float
    time_origin: float = DEFAULT_TIME_ORIGIN
    marker_names: Tuple[str, str] = DEFAULT_MARKER_NAMES

    @property
    def subject_ids(self):
        seen = []
        for record in self.records:
            if not seen or seen[-1] != record.subject_id:
                seen.append(record.subject_id)
        return tuple(seen)

    def by_subject(self):
        """Group records by subject, preserving canonical order."""
        groups = {}
        for record in self.records:
            groups.setdefault(record.subject_id, []).append(record)
        return {key: tuple(value) for key, value in groups.items()}

    def __len__(self):
        return len(self.records)


class DesignSpec(NamedTuple):
    """Fixed and random design description shared by both markers."""
    tau: float = DEFAULT_TAU
    include_intercept: bool = False
    terms: Tuple[str, ...] = PIECEWISE_TERMS

    def validate(self):
        """
        Check the invariants of the design description.

        Raises:
            InvalidArgumentError: If tau is not positive or terms are unknown/repeated
        """
        if not self.tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        if len(set(self.terms)) != len(self.terms):
            raise InvalidArgumentError(f"Design terms must be unique, got {self.terms}")
        unknown = [term for term in self.terms if term not in KNOWN_TERMS]
        if unknown:
            raise InvalidArgumentError(
                f"Unknown design terms {unknown}; expected some of {KNOWN_TERMS}"
            )
        if not self.terms and not self.include_intercept:
            raise InvalidArgumentError("Design needs at least one term or an intercept")
        return self

    @property
    def term_names(self):
        names = tuple(self.terms)
        if self.include_intercept:
            names = (INTERCEPT_TERM,) + names
        return names

    @property
    def terms_per_marker(self):
        return len(self.term_names)

    def column_names(self, marker_names=DEFAULT_MARKER_NAMES):
        """Fixed-effect column names, marker-major."""
        return tuple(
            f"{marker}:{term}" for marker in marker_names for term in self.term_names
        )


class SubjectDesign(NamedTuple):
    """Per-subject response and block design matrices (observed rows only)."""
    subject_id: str
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    marker_of_row: np.ndarray
    occasion_of_row: np.ndarray
    time_of_row: np.ndarray

    @property
    def n_rows(self):
        return len(self.y)


class ModelSpec(NamedTuple):
    """A complete model: design, random effects, residual structure and method."""
    design: DesignSpec = DesignSpec()
    random_effects: RandomEffects = RandomEffects.SLOPES
    residual: ResidualVariant = ResidualVariant.GROUPED_DIAGONAL
    independent: bool = False
    method: Method = Method.REML

    def validate(self):
        """
        Check the model description.

        Raises:
            InvalidArgumentError: If a field has an unsupported value
        """
        self.design.validate()
        if not isinstance(self.random_effects, RandomEffects):
            raise InvalidArgumentError(f"Unknown random effects: {self.random_effects!r}")
        if not isinstance(self.residual, ResidualVariant):
            raise InvalidArgumentError(f"Unknown residual structure: {self.residual!r}")
        if not isinstance(self.method, Method):
            raise InvalidArgumentError(f"Unknown method: {self.method!r}")
        return self

    @property
    def n_fixed(self):
        return 2 * self.design.terms_per_marker


class FitOptions(NamedTuple):
    """Optimizer settings for ``estimation.fit``."""
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    gradient_tolerance: float = DEFAULT_GRADIENT_TOLERANCE
    objective_tolerance: float = DEFAULT_OBJECTIVE_TOLERANCE
    gradient: str = "analytic"
    newton_steps: int = DEFAULT_NEWTON_STEPS
    workers: int = 1
    start: Optional[np.ndarray] = None


class FitResult(NamedTuple):
    """Estimates, likelihood summaries and convergence diagnostics of one fit."""
    spec: ModelSpec
    beta_names: Tuple[str, ...]
    beta_hat: np.ndarray
    se_beta: np.ndarray
    theta_names: Tuple[str, ...]
    theta_hat: np.ndarray
    se_theta: np.ndarray
    theta_intervals: Tuple[Tuple[float, float], ...]
    theta_unconstrained: np.ndarray
    G_hat: Optional[np.ndarray]
    C_hat: Optional[np.ndarray]
    rho_hat: Optional[Tuple[float, ...]]
    error_variances: Optional[Tuple[float, float]]
    log_likelihood: float
    parameter_count: int
    aic: float
    converged: bool
    iterations: int
    gradient_norm: float
    relative_change: float
    hessian_positive_definite: bool
    boundary: Tuple[str, ...]
    warnings: Tuple[str, ...]
    message: str
    n_subjects: int
    n_observations: int

    @property
    def method(self):
        return self.spec.method

    @property
    def fixed_effects(self):
        return dict(zip(self.beta_names, self.beta_hat))

    @property
    def covariance_parameters(self):
        return dict(zip(self.theta_names, self.theta_hat))


class SasOutputBundle(NamedTuple):
    """Covariance estimates as printed by the reference mixed-model software."""
    un_entries: Tuple[float, float, float]
    exp_var_delta: float
    residual_r: float
    ar1_cov: float


class SasTranslation(NamedTuple):
    """Model parameters recovered from a ``SasOutputBundle``."""
    sigma2_eps1: float
    sigma2_eps2: float
    rho: float
    C: np.ndarray


class ModelSummary(NamedTuple):
    """What model comparison needs from a fit."""
    name: str
    log_likelihood: float
    parameter_count: int
    method: Method = Method.REML
    fixed_effects: Tuple[str, ...] = ()
    converged: bool = True


class LikelihoodRatioResult(NamedTuple):
    """Outcome of a likelihood ratio test."""
    null: str
    alternative: str
    statistic: float
    df: int
    p_value: float


class ComparisonReport(NamedTuple):
    """Information-criterion table plus likelihood ratio tests."""
    rows: Tuple[ModelSummary, ...]
    aic: Tuple[float, ...]
    tests: Tuple[LikelihoodRatioResult, ...]


class MissingnessPattern(NamedTuple):
    """Missing-at-random deletion mechanism used by the simulator."""
    kind: str  # "dropout" or "intermittent"
    rate: float


class TruthParams(NamedTuple):
    """Ground truth for simulation."""
    beta: np.ndarray
    G: Optional[np.ndarray]
    serial: Optional[object]  # covariance.KroneckerAR1
    errors: Tuple[float, float]
    n_subjects: int
    occasions: Tuple[int, ...]
    seed: int
    occasion_spacing: float = DEFAULT_OCCASION_SPACING
    time_origin: float = DEFAULT_TIME_ORIGIN
    marker_names: Tuple[str, str] = DEFAULT_MARKER_NAMES


class RecoveryRow(NamedTuple):
    """Recovery summary of one parameter."""
    name: str
    truth: float
    mean: float
    bias: float
    mc_se: float
    passed: bool


class RecoveryReport(NamedTuple):
    """Outcome of a simulate-then-fit recovery run."""
    rows: Tuple[RecoveryRow, ...]
    replicates: int
    converged: int
    n_subjects: int

    @property
    def passed(self):
        return all(row.passed for row in self.rows)
