"""Synthetic bivariate longitudinal data with known truth, and recovery runs."""

import logging

import numpy as np
from scipy.special import ndtri

from bivariate_lmm.config import (
    DEFAULT_MARKER_NAMES,
    DEFAULT_OCCASION_SPACING,
    DEFAULT_OCCASIONS,
    DEFAULT_PRESET,
    DEFAULT_SUBJECTS,
    DEFAULT_TIME_ORIGIN,
    RECOVERY_TOLERANCE_SE,
    TRUTH_PRESETS,
)
from bivariate_lmm.covariance import CovarianceModel, KroneckerAR1, serial_cov_rows
from bivariate_lmm.data import build_design, make_dataset
from bivariate_lmm.errors import InvalidArgumentError
from bivariate_lmm.estimation import fit
from bivariate_lmm.inference import likelihood_ratio_test
from bivariate_lmm.models import (
    FitOptions,
    LongRecord,
    Marker,
    Method,
    MissingnessPattern,
    ModelSpec,
    RandomEffects,
    RecoveryReport,
    RecoveryRow,
    ResidualVariant,
    TruthParams,
)
from bivariate_lmm.utils import symmetric_factor

logger = logging.getLogger(__name__)

MISSINGNESS_KINDS = ("dropout", "intermittent")


def subject_generators(seed, count):
    """Independent counter-based (Philox) generators, one per subject."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def standard_normals(rng, size):
    """Standard normal draws by inverse-CDF of uniforms on (0, 1)."""
    return ndtri(rng.uniform(np.finfo(float).tiny, 1.0, size))


def validate_truth(truth, spec):
    """
    Check a truth against a design.

    Raises:
        InvalidArgumentError: If a component has the wrong shape or is not a valid covariance
    """
    spec.validate()
    dim = 2 * spec.terms_per_marker
    beta = np.asarray(truth.beta, dtype=float)
    if beta.shape != (dim,):
        raise InvalidArgumentError(f"beta must have {dim} entries for this design, got {beta.size}")
    if truth.G is not None:
        G = np.asarray(truth.G, dtype=float)
        if G.shape != (dim, dim) or not np.allclose(G, G.T):
            raise InvalidArgumentError(f"G must be a symmetric {dim}x{dim} matrix")
        if np.linalg.eigvalsh(G)[0] < -1e-10 * max(1.0, np.abs(G).max()):
            raise InvalidArgumentError("G must be positive semi-definite")
    if truth.serial is not None:
        truth.serial.validate()
    errors = np.asarray(truth.errors, dtype=float)
    if errors.shape != (2,) or np.any(errors < 0):
        raise InvalidArgumentError(f"errors must be two non-negative variances, got {truth.errors}")
    if truth.n_subjects < 1:
        raise InvalidArgumentError(f"n_subjects must be positive, got {truth.n_subjects}")
    occasions = list(truth.occasions)
    if not occasions or any(int(o) != o or o < 0 for o in occasions) or \
            len(set(occasions)) != len(occasions):
        raise InvalidArgumentError(f"occasions must be distinct non-negative integers, got {occasions}")
    return truth


def simulate(truth, spec):
    """
    Draw a dataset from the bivariate mixed model.

    Every subject is observed on both markers at all ``truth.occasions``.
    Y_i = X_i beta + Z_i gamma_i + W_i + eps_i with gamma_i ~ N(0, G),
    W_i ~ N(0, R_i) from the serial process and eps_i ~ N(0, Sigma_i).

    Args:
        truth: TruthParams
        spec: DesignSpec

    Returns:
        StackedDataset, reproducible from ``truth.seed``

    Raises:
        InvalidArgumentError: If the truth does not fit the design
    """
    validate_truth(truth, spec)
    occasions = sorted(int(o) for o in truth.occasions)
    spacing = truth.occasion_spacing
    times = [truth.time_origin + o * spacing for o in occasions]
    template_records = [
        LongRecord("template", Marker(k), t, o, 0.0)
        for k in range(2)
        for o, t in zip(occasions, times)
    ]
    template = build_design(
        make_dataset(template_records, spacing, truth.time_origin, truth.marker_names), spec
    )[0]
    mean = template.X @ np.asarray(truth.beta, dtype=float)

    dim = template.Z.shape[1]
    G_factor = symmetric_factor(truth.G) if truth.G is not None else np.zeros((dim, 0))
    serial_factor = (
        symmetric_factor(serial_cov_rows(truth.serial, template.marker_of_row, template.occasion_of_row))
        if truth.serial is not None
        else np.zeros((template.n_rows, 0))
    )
    error_sd = np.sqrt(np.asarray(truth.errors, dtype=float))[template.marker_of_row]

    width = len(str(truth.n_subjects))
    records = []
    for index, rng in enumerate(subject_generators(truth.seed, truth.n_subjects)):
        gamma = G_factor @ standard_normals(rng, G_factor.shape[1])
        serial = serial_factor @ standard_normals(rng, serial_factor.shape[1])
        noise = error_sd * standard_normals(rng, template.n_rows)
        y = mean + template.Z @ gamma + serial + noise
        subject_id = f"S{index + 1:0{width}d}"
        for row in range(template.n_rows):
            records.append(LongRecord(
                subject_id,
                Marker(int(template.marker_of_row[row])),
                float(template.time_of_row[row]),
                int(template.occasion_of_row[row]),
                float(y[row]),
            ))
    return make_dataset(records, spacing, truth.time_origin, truth.marker_names)


def apply_mar_missingness(dataset, pattern, seed):
    """
    Delete records by a mechanism that depends only on the occasion.

    Dropout: each subject leaves the study at a geometrically distributed
    occasion and every later record of both markers is removed. Intermittent:
    each post-baseline (marker, occasion) record is removed independently.
    Baseline records (occasion 0) are never removed.

    Args:
        dataset: StackedDataset
        pattern: MissingnessPattern
        seed: Seed for the per-subject generators

    Returns:
        StackedDataset

    Raises:
        InvalidArgumentError: If the kind is unknown or the rate is outside [0, 1)
    """
    if pattern.kind not in MISSINGNESS_KINDS:
        raise InvalidArgumentError(
            f"Unknown missingness kind {pattern.kind!r}; expected one of {MISSINGNESS_KINDS}"
        )
    if not 0 <= pattern.rate < 1:
        raise InvalidArgumentError(f"Missingness rate must lie in [0, 1), got {pattern.rate}")
    if pattern.rate == 0:
        return dataset

    subjects = dataset.by_subject()
    kept = []
    for rng, (subject_id, records) in zip(subject_generators(seed, len(subjects)), subjects.items()):
        if pattern.kind == "intermittent":
            draws = rng.uniform(size=len(records))
            kept.extend(
                record for record, u in zip(records, draws)
                if record.occasion == 0 or u >= pattern.rate
            )
            continue
        cutoff = None
        for occasion in sorted({record.occasion for record in records if record.occasion > 0}):
            if rng.uniform() < pattern.rate:
                cutoff = occasion
                break
        kept.extend(r for r in records if cutoff is None or r.occasion < cutoff)

    removed = len(dataset.records) - len(kept)
    logger.debug("Missingness %s(%.3g) removed %d of %d records",
                 pattern.kind, pattern.rate, removed, len(dataset.records))
    return make_dataset(kept, dataset.occasion_spacing, dataset.time_origin, dataset.marker_names)


def truth_from_dict(data, n_subjects=DEFAULT_SUBJECTS, occasions=DEFAULT_OCCASIONS, seed=0,
                    occasion_spacing=DEFAULT_OCCASION_SPACING, time_origin=DEFAULT_TIME_ORIGIN,
                    marker_names=DEFAULT_MARKER_NAMES):
    """
    TruthParams from a plain mapping (beta, G, serial {C, rho}, errors).

    Raises:
        InvalidArgumentError: If a component is missing or malformed
    """
    if "beta" not in data or "errors" not in data:
        raise InvalidArgumentError("Truth needs at least 'beta' and 'errors'")
    serial = data.get("serial")
    if serial is not None:
        rho = serial.get("rho")
        serial = KroneckerAR1(
            C=np.asarray(serial["C"], dtype=float),
            rho=tuple(rho) if isinstance(rho, (list, tuple)) else float(rho),
        )
    G = data.get("G")
    return TruthParams(
        beta=np.asarray(data["beta"], dtype=float),
        G=None if G is None else np.asarray(G, dtype=float),
        serial=serial,
        errors=tuple(float(e) for e in data["errors"]),
        n_subjects=int(data.get("n_subjects", n_subjects)),
        occasions=tuple(int(o) for o in data.get("occasions", occasions)),
        seed=int(data.get("seed", seed)),
        occasion_spacing=float(data.get("occasion_spacing", occasion_spacing)),
        time_origin=float(data.get("time_origin", time_origin)),
        marker_names=tuple(data.get("marker_names", marker_names)),
    )


def truth_from_preset(name=DEFAULT_PRESET, **overrides):
    """
    TruthParams from a built-in preset, with keyword overrides.

    Example:
        >>> truth = truth_from_preset("ar1-error", n_subjects=50, seed=7)
    """
    if name not in TRUTH_PRESETS:
        raise InvalidArgumentError(
            f"Unknown truth preset {name!r}; available: {', '.join(sorted(TRUTH_PRESETS))}"
        )
    data = {key: value for key, value in TRUTH_PRESETS[name].items() if key != "model"}
    data.update(overrides)
    return truth_from_dict(data)


def truth_to_dict(truth):
    """JSON-ready form of a TruthParams."""
    serial = None
    if truth.serial is not None:
        rho = truth.serial.rho
        serial = {
            "C": np.asarray(truth.serial.C, dtype=float).tolist(),
            "rho": list(rho) if isinstance(rho, (list, tuple)) else float(rho),
        }
    return {
        "beta": np.asarray(truth.beta, dtype=float).tolist(),
        "G": None if truth.G is None else np.asarray(truth.G, dtype=float).tolist(),
        "serial": serial,
        "errors": [float(e) for e in truth.errors],
        "n_subjects": int(truth.n_subjects),
        "occasions": [int(o) for o in truth.occasions],
        "seed": int(truth.seed),
        "occasion_spacing": float(truth.occasion_spacing),
        "time_origin": float(truth.time_origin),
        "marker_names": list(truth.marker_names),
    }


def true_parameters(truth, spec):
    """
    Names and true values of every parameter a model estimates.

    Returns:
        Tuple (names, values): fixed effects first, then natural covariance parameters
    """
    cov = CovarianceModel(spec, truth.marker_names)
    names = spec.design.column_names(truth.marker_names) + cov.names
    values = np.concatenate([
        np.asarray(truth.beta, dtype=float),
        cov.natural_from_components(truth.G, truth.serial, truth.errors),
    ])
    return names, values


def summarize_recovery(names, truth_values, estimates, n_subjects, replicates,
                       tolerance=RECOVERY_TOLERANCE_SE):
    """
    Bias and Monte-Carlo standard error of replicate estimates.

    The MC SE of a parameter is the standard deviation of its estimates over
    the converged replicates divided by the square root of their number. A
    parameter passes when |bias| <= tolerance * MC SE.
    """
    estimates = np.asarray(estimates, dtype=float).reshape(-1, len(names))
    converged = estimates.shape[0]
    rows = []
    for j, name in enumerate(names):
        values = estimates[:, j]
        mean = float(values.mean()) if converged else float("nan")
        bias = mean - float(truth_values[j])
        mc_se = float(values.std(ddof=1) / np.sqrt(converged)) if converged > 1 else float("nan")
        passed = bool(np.isfinite(mc_se) and abs(bias) <= tolerance * mc_se)
        rows.append(RecoveryRow(name, float(truth_values[j]), mean, bias, mc_se, passed))
    return RecoveryReport(tuple(rows), replicates, converged, n_subjects)


def recovery(truth, spec, replicates, missingness=None, options=FitOptions(), callback=None):
    """
    Simulate-then-fit harness.

    Each replicate draws a fresh dataset (seeds derived from ``truth.seed``),
    optionally applies MAR missingness and fits ``spec``. Non-converged fits
    are excluded from the summary.

    Args:
        truth: TruthParams
        spec: ModelSpec to fit
        replicates: Number of simulated datasets
        missingness: Optional MissingnessPattern
        options: FitOptions for every fit
        callback: Called with the number of finished replicates

    Returns:
        RecoveryReport
    """
    if replicates < 1:
        raise InvalidArgumentError(f"replicates must be positive, got {replicates}")
    names, truth_values = true_parameters(truth, spec)
    seeds = [
        int(child.generate_state(1)[0])
        for child in np.random.SeedSequence(truth.seed).spawn(replicates)
    ]

    estimates = []
    for index, seed in enumerate(seeds):
        dataset = simulate(truth._replace(seed=seed), spec.design)
        if missingness is not None:
            dataset = apply_mar_missingness(dataset, missingness, seed + 1)
        result = fit(dataset, spec, options)
        if result.converged:
            estimates.append(np.concatenate([result.beta_hat, result.theta_hat]))
        else:
            logger.warning("Replicate %d did not converge; excluded from recovery summary", index + 1)
        if callback:
            callback(index + 1)

    return summarize_recovery(names, truth_values, estimates, truth.n_subjects, replicates)


def null_lrt_statistics(truth, design, replicates, options=FitOptions(), callback=None):
    """
    LRT statistics of masked vs full random-slopes models on data with G12 = 0.

    Both models are fitted by ML with grouped error. The full model starts
    from the masked optimum. Used to check that the statistic behaves like
    its null chi-square distribution.
    """
    full = ModelSpec(design, RandomEffects.SLOPES, ResidualVariant.GROUPED_DIAGONAL, False, Method.ML)
    masked = full._replace(independent=True)
    full_cov = CovarianceModel(full, truth.marker_names)
    seeds = [
        int(child.generate_state(1)[0])
        for child in np.random.SeedSequence(truth.seed).spawn(replicates)
    ]
    statistics = []
    for index, seed in enumerate(seeds):
        dataset = simulate(truth._replace(seed=seed), design)
        null_fit = fit(dataset, masked, options)
        start = full_cov.to_unconstrained(
            full_cov.natural_from_components(null_fit.G_hat, None, null_fit.error_variances)
        )
        alt_fit = fit(dataset, full, options._replace(start=start))
        df = alt_fit.parameter_count - null_fit.parameter_count
        statistics.append(likelihood_ratio_test(
            null_fit.log_likelihood, alt_fit.log_likelihood, df
        ).statistic)
        if callback:
            callback(index + 1)
    return np.array(statistics)


def missingness_from_dict(data):
    """MissingnessPattern from {"kind": ..., "rate": ...} (None passes through)."""
    if data is None:
        return None
    try:
        return MissingnessPattern(kind=str(data["kind"]), rate=float(data["rate"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidArgumentError(f"Invalid missingness block {data!r}") from e
