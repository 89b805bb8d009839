"""Exceptions raised by bivariate_lmm."""


class BivariateLMMError(Exception):
    """Base class for every error raised by this package."""


class InputError(BivariateLMMError, ValueError):
    """Bad user input: data files, configuration or arguments."""


class InvalidArgumentError(InputError):
    """An argument is outside its documented domain."""


class DataParseError(InputError):
    """A CSV file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateObservationError(InputError):
    """Two records share the same (subject, marker, occasion)."""

    def __init__(self, subject_id, marker, occasion):
        self.subject_id = subject_id
        self.marker = marker
        self.occasion = occasion
        super().__init__(
            f"Duplicate observation for subject {subject_id!r}, "
            f"marker {marker}, occasion {occasion}"
        )


class GridViolationError(InputError):
    """A measurement time does not sit on the occasion grid."""

    def __init__(self, subject_id, time, spacing):
        self.subject_id = subject_id
        self.time = time
        self.spacing = spacing
        super().__init__(
            f"Time {time} of subject {subject_id!r} is not on the occasion grid "
            f"(spacing {spacing}). Measures must be equally spaced."
        )


class ConfigError(InputError):
    """The run configuration is missing fields or has invalid values."""


class DimensionMismatchError(BivariateLMMError):
    """Internal-consistency failure between a design and a covariance structure."""


class CovarianceEvaluationError(BivariateLMMError):
    """A marginal covariance matrix is not positive definite."""

    def __init__(self, subject_id, message=None):
        self.subject_id = subject_id
        super().__init__(
            message or f"Marginal covariance of subject {subject_id!r} is not positive definite"
        )


class NearSingularCovarianceError(CovarianceEvaluationError):
    """A marginal covariance matrix is numerically singular."""

    def __init__(self, subject_id, condition_number):
        self.condition_number = condition_number
        super().__init__(
            subject_id,
            f"Marginal covariance of subject {subject_id!r} is near singular "
            f"(condition number {condition_number:.3g})",
        )


class RankDeficiencyError(InputError):
    """The fixed-effects design is not of full column rank."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(
            "Fixed-effects design is rank deficient; collinear columns: "
            + ", ".join(self.columns)
        )


class NestingViolationError(InputError):
    """A likelihood ratio test was requested for models that are not nested."""


class InvalidBundleError(InputError):
    """Reference-software output values do not form a valid parameter set."""
