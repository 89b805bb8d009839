"""Plain-text and JSON renderings of fits, comparisons and recovery runs."""

import json
import math

import numpy as np

from bivariate_lmm.config import CONFIDENCE_LEVEL, INTERVAL_METHOD, REPORT_TITLE
from bivariate_lmm.errors import InvalidArgumentError
from bivariate_lmm.inference import cov_to_corr, summarize_fit, summary_to_dict, wald_test
from bivariate_lmm.utils import format_number, format_p_value

RULE = "=" * 72


def _table(header, rows):
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w)
                       for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                               for i, (cell, w) in enumerate(zip(row, widths))))
    return lines


def _json_number(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _json_vector(values):
    return [_json_number(v) for v in np.asarray(values, dtype=float).ravel()]


def _json_matrix(M):
    if M is None:
        return None
    return [_json_vector(row) for row in np.atleast_2d(np.asarray(M, dtype=float))]


def _safe_wald(estimate, se):
    try:
        return wald_test(estimate, se)
    except InvalidArgumentError:
        return math.nan, math.nan


def format_comparison_table(report):
    """
    Model comparison table (log likelihood, No. of parameters, AIC) and LRT lines.

    Example output:
        Model                    Log Likelihood  No. of parameters    AIC
        bivariate AR(1)                  -25183                 10  50386
    """
    rows = [
        (row.name, format_number(row.log_likelihood), str(row.parameter_count), format_number(value))
        for row, value in zip(report.rows, report.aic)
    ]
    lines = _table(("Model", "Log Likelihood", "No. of parameters", "AIC"), rows)
    lines.append("AIC = (-2 log likelihood) + 2 (No. of parameters)")
    for test in report.tests:
        lines.append(
            f"LRT {test.null} vs {test.alternative}: statistic {format_number(test.statistic)}, "
            f"df {test.df}, p {format_p_value(test.p_value)}"
        )
    return "\n".join(lines)


def format_fit_detail(name, result):
    """Fixed effects, covariance parameters and the correlation matrix of G for one fit."""
    spec = result.spec
    lines = [
        RULE,
        f"{name}  ({spec.method.value}, random effects: {spec.random_effects.value}, "
        f"residual: {spec.residual.value}{', independent markers' if spec.independent else ''})",
        RULE,
        f"Subjects: {result.n_subjects}   Observations: {result.n_observations}",
        f"Log likelihood: {format_number(result.log_likelihood)}   "
        f"Parameters: {result.parameter_count}   AIC: {format_number(result.aic)}",
        f"Converged: {'yes' if result.converged else 'no'}   Iterations: {result.iterations}   "
        f"Gradient norm: {format_number(result.gradient_norm, 3)}",
        "",
        "Fixed effects",
    ]
    rows = []
    for beta_name, estimate, se in zip(result.beta_names, result.beta_hat, result.se_beta):
        z, p = _safe_wald(estimate, se)
        rows.append((beta_name, format_number(estimate), format_number(se),
                     format_number(z, 4), format_p_value(p)))
    lines.extend("  " + line for line in _table(("Effect", "Estimate", "SE", "z", "p"), rows))

    if len(result.theta_names):
        level = f"{int(round(CONFIDENCE_LEVEL * 100))}%"
        lines.extend(["", f"Covariance parameters ({level} intervals: {INTERVAL_METHOD})"])
        rows = [
            (theta_name, format_number(estimate), format_number(se),
             format_number(low), format_number(high))
            for theta_name, estimate, se, (low, high)
            in zip(result.theta_names, result.theta_hat, result.se_theta, result.theta_intervals)
        ]
        lines.extend("  " + line for line in
                     _table(("Parameter", "Estimate", "SE", "Lower", "Upper"), rows))

    if result.G_hat is not None and np.all(np.diag(result.G_hat) > 0):
        labels = list(result.beta_names)
        corr = cov_to_corr(result.G_hat)
        lines.extend(["", "Correlation matrix of G"])
        rows = [(label, *(format_number(v, 3) for v in corr[i])) for i, label in enumerate(labels)]
        lines.extend("  " + line for line in _table(("", *labels), rows))

    for warning in result.warnings:
        lines.append(f"⚠️  {warning}")
    return "\n".join(lines)


def format_fit_report(fits, comparison):
    """Full fit report: comparison table then per-model detail."""
    parts = [REPORT_TITLE, "", format_comparison_table(comparison)]
    for name, result in fits:
        parts.extend(["", format_fit_detail(name, result)])
    return "\n".join(parts) + "\n"


def format_recovery(report):
    """Per-parameter truth, mean estimate, bias, MC SE and pass/fail."""
    rows = [
        (row.name, format_number(row.truth), format_number(row.mean), format_number(row.bias),
         format_number(row.mc_se), "pass" if row.passed else "FAIL")
        for row in report.rows
    ]
    lines = [
        REPORT_TITLE,
        "",
        f"Recovery: {report.converged}/{report.replicates} replicates converged, "
        f"{report.n_subjects} subjects each",
        "",
        *_table(("Parameter", "Truth", "Mean", "Bias", "MC SE", "Result"), rows),
        "",
        f"Overall: {'pass' if report.passed else 'FAIL'}",
    ]
    return "\n".join(lines) + "\n"


def format_changes_table(frame):
    """Descriptive table of changes: time, N, mean and SD per marker."""
    rows = [
        (str(row.marker), format_number(row.time), str(int(row.n)),
         format_number(row.mean, 4), format_number(row.sd, 4))
        for row in frame.itertuples(index=False)
    ]
    return "\n".join(_table(("Marker", "Time", "N", "Mean", "SD"), rows))


def fit_to_dict(name, result):
    """Machine-readable fit at full precision (non-finite numbers become null)."""
    return {
        "name": name,
        "summary": summary_to_dict(summarize_fit(result, name)),
        "spec": {
            "random_effects": result.spec.random_effects.value,
            "residual": result.spec.residual.value,
            "independent": bool(result.spec.independent),
            "method": result.spec.method.value,
        },
        "aic": _json_number(result.aic),
        "fixed_effects": [
            {"name": n, "estimate": _json_number(e), "se": _json_number(s)}
            for n, e, s in zip(result.beta_names, result.beta_hat, result.se_beta)
        ],
        "covariance_parameters": [
            {"name": n, "estimate": _json_number(e), "se": _json_number(s),
             "lower": _json_number(lo), "upper": _json_number(hi)}
            for n, e, s, (lo, hi)
            in zip(result.theta_names, result.theta_hat, result.se_theta, result.theta_intervals)
        ],
        "interval_method": INTERVAL_METHOD,
        "G": _json_matrix(result.G_hat),
        "C": _json_matrix(result.C_hat),
        "rho": None if result.rho_hat is None else _json_vector(result.rho_hat),
        "error_variances": None if result.error_variances is None
        else _json_vector(result.error_variances),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "gradient_norm": _json_number(result.gradient_norm),
        "hessian_positive_definite": bool(result.hessian_positive_definite),
        "boundary": list(result.boundary),
        "warnings": list(result.warnings),
        "n_subjects": int(result.n_subjects),
        "n_observations": int(result.n_observations),
    }


def comparison_to_dict(report):
    return {
        "models": [
            {**summary_to_dict(row), "aic": _json_number(value)}
            for row, value in zip(report.rows, report.aic)
        ],
        "tests": [
            {"null": t.null, "alternative": t.alternative, "statistic": _json_number(t.statistic),
             "df": t.df, "p_value": _json_number(t.p_value)}
            for t in report.tests
        ],
    }


def recovery_to_dict(report, truth=None):
    return {
        "replicates": report.replicates,
        "converged": report.converged,
        "n_subjects": report.n_subjects,
        "passed": report.passed,
        "parameters": [
            {"name": r.name, "truth": _json_number(r.truth), "mean": _json_number(r.mean),
             "bias": _json_number(r.bias), "mc_se": _json_number(r.mc_se), "passed": r.passed}
            for r in report.rows
        ],
        "truth": truth,
    }


def to_json(data):
    """Deterministic JSON text (sorted keys, two-space indent, trailing newline)."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
