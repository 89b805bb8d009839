"""Model comparison arithmetic: AIC, likelihood ratio and Wald tests, translations."""

import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy import stats

from bivariate_lmm.config import CONFIDENCE_LEVEL, NESTING_SLACK
from bivariate_lmm.covariance import CovarianceModel
from bivariate_lmm.errors import (
    ConfigError,
    InvalidArgumentError,
    InvalidBundleError,
    NestingViolationError,
)
from bivariate_lmm.models import (
    ComparisonReport,
    LikelihoodRatioResult,
    Method,
    ModelSummary,
    SasOutputBundle,
    SasTranslation,
)

logger = logging.getLogger(__name__)


def aic(log_likelihood, n_params):
    """
    Akaike information criterion, -2 logL + 2k.

    Args:
        log_likelihood: Maximised log-likelihood
        n_params: Number of parameters (fixed effects plus covariance parameters)

    Returns:
        AIC value

    Raises:
        InvalidArgumentError: If n_params is negative

    Example:
        >>> aic(-25183, 10)
        50386
    """
    if n_params < 0:
        raise InvalidArgumentError(f"n_params must be non-negative, got {n_params}")
    return -2 * log_likelihood + 2 * n_params


def parameter_count(spec):
    """Fixed-effect columns plus free covariance parameters of a model."""
    return spec.n_fixed + CovarianceModel(spec).n_params


def likelihood_ratio_test(logl_null, logl_alt, df, null="null", alternative="alternative"):
    """
    Likelihood ratio test of a null model nested in an alternative.

    Args:
        logl_null: Log-likelihood of the restricted model
        logl_alt: Log-likelihood of the larger model
        df: Difference in parameter counts
        null: Name of the null model (reporting only)
        alternative: Name of the alternative model (reporting only)

    Returns:
        LikelihoodRatioResult with statistic 2(logL_alt - logL_null) and the
        chi-square upper-tail p-value

    Raises:
        InvalidArgumentError: If df < 1
        NestingViolationError: If the alternative fits materially worse than the null
    """
    if int(df) != df or df < 1:
        raise InvalidArgumentError(f"df must be a positive integer, got {df}")
    if logl_alt < logl_null - NESTING_SLACK:
        raise NestingViolationError(
            f"{alternative} (logL {logl_alt}) fits worse than {null} (logL {logl_null}); "
            "the models cannot be nested"
        )
    statistic = max(2.0 * (logl_alt - logl_null), 0.0)
    p_value = float(stats.chi2.sf(statistic, int(df)))
    return LikelihoodRatioResult(null, alternative, statistic, int(df), p_value)


def wald_test(estimate, se):
    """
    Two-sided Wald test of estimate = 0.

    Returns:
        Tuple (z, p)

    Raises:
        InvalidArgumentError: If se is not positive
    """
    if not se > 0:
        raise InvalidArgumentError(f"Standard error must be positive, got {se}")
    z = estimate / se
    return z, float(2.0 * stats.norm.sf(abs(z)))


def wald_interval(estimate, se, transform="identity", level=CONFIDENCE_LEVEL):
    """
    Wald confidence limits computed on a transformed scale and mapped back.

    Args:
        estimate: Natural-scale estimate
        se: Natural-scale standard error
        transform: "identity", "log" (variances) or "atanh" (correlations)
        level: Confidence level

    Returns:
        Tuple (lower, upper); NaNs when the standard error is unavailable
    """
    if transform not in ("identity", "log", "atanh"):
        raise InvalidArgumentError(f"Unknown interval transform: {transform!r}")
    if se is None or not np.isfinite(se) or not np.isfinite(estimate):
        return (math.nan, math.nan)
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    if transform == "log":
        if estimate <= 0:
            return (math.nan, math.nan)
        half = z * se / estimate
        return (estimate * math.exp(-half), estimate * math.exp(half))
    if transform == "atanh":
        if abs(estimate) >= 1:
            return (math.nan, math.nan)
        center = math.atanh(estimate)
        half = z * se / (1.0 - estimate ** 2)
        return (math.tanh(center - half), math.tanh(center + half))
    return (estimate - z * se, estimate + z * se)


def cov_to_corr(M):
    """
    Correlation matrix of a covariance matrix.

    Raises:
        InvalidArgumentError: If a diagonal entry is not positive
    """
    M = np.asarray(M, dtype=float)
    diagonal = np.diag(M)
    if np.any(diagonal <= 0):
        raise InvalidArgumentError(f"Diagonal must be strictly positive, got {diagonal.tolist()}")
    scale = np.sqrt(diagonal)
    corr = M / np.outer(scale, scale)
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def sas_translate(bundle):
    """
    Recover error variances, rho and C from mixed-model software output.

    The software fits a common residual r with a local-effect parameter delta
    ('EXP VAR') so that the two error variances are r*exp(delta) and
    r*exp(-delta); the 'AR(1)' covariance divided by r is the correlation.

    Args:
        bundle: SasOutputBundle

    Returns:
        SasTranslation

    Raises:
        InvalidBundleError: If r is not positive or |rho| >= 1

    Example:
        >>> t = sas_translate(SasOutputBundle((1.54, -7.0, 195.0), 3.11, 3.42, 3.11))
        >>> round(t.sigma2_eps1, 2), round(t.sigma2_eps2, 2), round(t.rho, 2)
        (76.68, 0.15, 0.91)
    """
    r = float(bundle.residual_r)
    if not r > 0:
        raise InvalidBundleError(f"Residual must be positive, got {r}")
    rho = float(bundle.ar1_cov) / r
    if abs(rho) >= 1:
        raise InvalidBundleError(f"AR(1) covariance {bundle.ar1_cov} implies |rho| >= 1")
    s11, s12, s22 = (float(v) for v in bundle.un_entries)
    return SasTranslation(
        sigma2_eps1=r * math.exp(bundle.exp_var_delta),
        sigma2_eps2=r * math.exp(-bundle.exp_var_delta),
        rho=rho,
        C=np.array([[s11, s12], [s12, s22]]),
    )


def sas_bundle_from_natural(sigma2_eps1, sigma2_eps2, rho, C):
    """
    Inverse of ``sas_translate``.

    Raises:
        InvalidArgumentError: If an error variance is not positive or |rho| >= 1
    """
    if not (sigma2_eps1 > 0 and sigma2_eps2 > 0):
        raise InvalidArgumentError("Error variances must be positive")
    if abs(rho) >= 1:
        raise InvalidArgumentError(f"rho must lie in (-1, 1), got {rho}")
    C = np.asarray(C, dtype=float)
    r = math.sqrt(sigma2_eps1 * sigma2_eps2)
    return SasOutputBundle(
        un_entries=(float(C[0, 0]), float(C[1, 0]), float(C[1, 1])),
        exp_var_delta=0.5 * math.log(sigma2_eps1 / sigma2_eps2),
        residual_r=r,
        ar1_cov=rho * r,
    )


def summarize_fit(result, name):
    """ModelSummary of a FitResult."""
    return ModelSummary(
        name=name,
        log_likelihood=float(result.log_likelihood),
        parameter_count=int(result.parameter_count),
        method=result.method,
        fixed_effects=tuple(result.beta_names),
        converged=bool(result.converged),
    )


def compare_models(summaries, nested_pairs=()):
    """
    AIC table plus likelihood ratio tests for declared nested pairs.

    Args:
        summaries: Sequence of ModelSummary (names unique)
        nested_pairs: Sequence of (null name, alternative name)

    Returns:
        ComparisonReport

    Raises:
        InvalidArgumentError: Duplicate or unknown model names
        NestingViolationError: A requested test is not valid (different
            methods, different fixed effects under REML, or no extra parameters)
    """
    rows = tuple(summaries)
    by_name = {}
    for row in rows:
        if row.name in by_name:
            raise InvalidArgumentError(f"Duplicate model name: {row.name!r}")
        by_name[row.name] = row

    tests = []
    for null_name, alt_name in nested_pairs:
        missing = [n for n in (null_name, alt_name) if n not in by_name]
        if missing:
            raise InvalidArgumentError(f"Unknown model(s) in nested pair: {', '.join(missing)}")
        null, alt = by_name[null_name], by_name[alt_name]
        if Method(null.method) is not Method(alt.method):
            raise NestingViolationError(
                f"Cannot test {null_name} against {alt_name}: fitted by different methods "
                f"({Method(null.method).value} vs {Method(alt.method).value})"
            )
        if Method(null.method) is Method.REML and tuple(null.fixed_effects) != tuple(alt.fixed_effects):
            raise NestingViolationError(
                f"Cannot test {null_name} against {alt_name}: REML likelihoods of models with "
                "different fixed effects are not comparable; refit with ML"
            )
        df = alt.parameter_count - null.parameter_count
        if df < 1:
            raise NestingViolationError(
                f"{null_name} is not nested in {alt_name}: the alternative has no extra parameters"
            )
        if not (null.converged and alt.converged):
            logger.warning("Likelihood ratio test %s vs %s uses a non-converged fit", null_name, alt_name)
        tests.append(likelihood_ratio_test(
            null.log_likelihood, alt.log_likelihood, df, null=null_name, alternative=alt_name
        ))

    return ComparisonReport(
        rows=rows,
        aic=tuple(aic(row.log_likelihood, row.parameter_count) for row in rows),
        tests=tuple(tests),
    )


def summary_to_dict(summary):
    return {
        "name": summary.name,
        "log_likelihood": summary.log_likelihood,
        "parameter_count": summary.parameter_count,
        "method": Method(summary.method).value,
        "fixed_effects": list(summary.fixed_effects),
        "converged": summary.converged,
    }


def summary_from_dict(data):
    """
    Build a ModelSummary from its JSON form.

    Raises:
        ConfigError: If required fields are missing or invalid
    """
    missing = [key for key in ("name", "log_likelihood", "parameter_count") if key not in data]
    if missing:
        raise ConfigError(f"Model summary is missing fields: {', '.join(missing)}")
    try:
        return ModelSummary(
            name=str(data["name"]),
            log_likelihood=float(data["log_likelihood"]),
            parameter_count=int(data["parameter_count"]),
            method=Method(data.get("method", Method.REML.value)),
            fixed_effects=tuple(data.get("fixed_effects", ())),
            converged=bool(data.get("converged", True)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid model summary {data.get('name')!r}: {e}") from e


def load_summaries(path):
    """
    Read model summaries from a JSON file.

    Accepts a single summary object, a list of them, or a fit report sidecar
    (an object with a "models" list).

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If the file is not valid JSON or a summary is incomplete
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Summary file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if isinstance(data, dict) and "models" in data:
        data = [model.get("summary", model) for model in data["models"]]
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise ConfigError(f"{path} must contain a summary object or a list of them")
    return [summary_from_dict(item) for item in data]
