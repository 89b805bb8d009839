"""Profiled (RE)ML likelihood and the model fitting loop."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize

from bivariate_lmm.config import (
    BOUNDARY_FRACTION,
    DEFAULT_MARKER_NAMES,
    MAX_STEP_HALVINGS,
    RHO_IDENTIFIABILITY,
    START_FRACTION,
    START_RHO,
)
from bivariate_lmm.covariance import CovarianceModel, KroneckerAR1, factor_marginal_cov
from bivariate_lmm.data import build_design
from bivariate_lmm.errors import (
    CovarianceEvaluationError,
    InvalidArgumentError,
    RankDeficiencyError,
)
from bivariate_lmm.inference import aic, wald_interval
from bivariate_lmm.models import FitOptions, FitResult, Method
from bivariate_lmm.utils import (
    central_gradient,
    central_jacobian,
    hessian_from_gradient,
    is_positive_definite,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# Wald interval scale per natural parameter kind
INTERVAL_TRANSFORMS = {"variance": "log", "correlation": "atanh", "covariance": "identity"}


class PatternGroup(NamedTuple):
    """Subjects whose designs are identical, so they share one factorisation of V."""
    template: object  # SubjectDesign of the first member
    subject_ids: tuple
    Y: np.ndarray  # one column per member


class Evaluation(NamedTuple):
    """Objective value at one theta."""
    value: float
    beta: np.ndarray
    gradient: object  # np.ndarray or None
    beta_cov: np.ndarray


def group_by_pattern(designs):
    """
    Group subject designs by their (markers, occasions, X, Z) pattern.

    Args:
        designs: Sequence of SubjectDesign

    Returns:
        Tuple of PatternGroup in order of first appearance
    """
    groups = {}
    for design in designs:
        key = (
            design.marker_of_row.tobytes(),
            design.occasion_of_row.tobytes(),
            np.ascontiguousarray(design.X).tobytes(),
            np.ascontiguousarray(design.Z).tobytes(),
            design.X.shape,
            design.Z.shape,
        )
        groups.setdefault(key, []).append(design)
    return tuple(
        PatternGroup(
            template=members[0],
            subject_ids=tuple(d.subject_id for d in members),
            Y=np.column_stack([d.y for d in members]),
        )
        for members in groups.values()
    )


def collinear_columns(gram, names, tolerance=1e-10):
    """
    Names of the fixed-effects columns involved in a linear dependency.

    Columns are added greedily; a column that does not raise the rank of the
    Gram matrix is dependent, and every column carrying weight in that
    dependency is reported.
    """
    gram = np.asarray(gram, dtype=float)
    scale = max(np.abs(np.diag(gram)).max(initial=0.0), 1.0)
    kept, involved = [], set()
    for j in range(gram.shape[0]):
        index = kept + [j]
        sub = gram[np.ix_(index, index)]
        values, vectors = np.linalg.eigh(sub)
        if values[0] > tolerance * scale:
            kept.append(j)
            continue
        weights = np.abs(vectors[:, 0])
        involved.update(index[i] for i in np.flatnonzero(weights > 1e-6))
    return [names[j] for j in sorted(involved)]


class LikelihoodEvaluator:
    """Profiled negative log-likelihood of one model on one set of subject designs."""

    def __init__(self, designs, spec, marker_names=DEFAULT_MARKER_NAMES, workers=1):
        designs = tuple(designs)
        if not designs:
            raise InvalidArgumentError("Cannot fit a model to an empty dataset")
        spec.validate()
        self.spec = spec
        self.designs = designs
        self.cov = CovarianceModel(spec, marker_names)
        self.groups = group_by_pattern(designs)
        self.p = designs[0].X.shape[1]
        self.n_obs = sum(d.n_rows for d in designs)
        self.reml = spec.method is Method.REML
        self.workers = max(1, int(workers))
        self.beta_names = spec.design.column_names(marker_names)

        gram = sum(d.X.T @ d.X for d in designs)
        dependent = collinear_columns(gram, self.beta_names)
        if dependent:
            raise RankDeficiencyError(dependent)
        if self.reml and self.n_obs <= self.p:
            raise InvalidArgumentError(
                f"REML needs more observations ({self.n_obs}) than fixed effects ({self.p})"
            )

    def _map(self, func, items):
        if self.workers == 1 or len(items) < 2:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(func, items))

    def _group_terms(self, theta, derivatives):
        def terms(group):
            template = group.template
            m = group.Y.shape[1]
            with np.errstate(over="ignore", invalid="ignore"):
                V, dVs = self.cov.marginal_cov(template, theta, derivatives)
            factor = factor_marginal_cov(V, group.subject_ids[0])
            logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
            Xv = cho_solve(factor, template.X)
            Yv = cho_solve(factor, group.Y)
            return {
                "m": m,
                "logdet": m * logdet,
                "A": m * (template.X.T @ Xv),
                "b": template.X.T @ Yv.sum(axis=1),
                "factor": factor,
                "X": template.X,
                "Y": group.Y,
                "Xv": Xv,
                "Yv": Yv,
                "dVs": dVs,
            }
        return self._map(terms, self.groups)

    def evaluate(self, theta, gradient=False):
        """
        Objective, GLS fixed effects and (optionally) the analytic gradient.

        Raises:
            CovarianceEvaluationError: If some V is not positive definite
            RankDeficiencyError: If the GLS system is singular
        """
        theta = np.asarray(theta, dtype=float)
        parts = self._group_terms(theta, gradient)

        A = np.zeros((self.p, self.p))
        b = np.zeros(self.p)
        logdet = 0.0
        for part in parts:
            A += part["A"]
            b += part["b"]
            logdet += part["logdet"]
        try:
            A_factor = cho_factor(A, lower=True)
        except LinAlgError as e:
            raise RankDeficiencyError(self.beta_names) from e
        beta = cho_solve(A_factor, b)
        beta_cov = cho_solve(A_factor, np.eye(self.p))

        quadratic = 0.0
        for part in parts:
            residual = part["Y"] - part["X"] @ beta[:, None]
            residual_v = part["Yv"] - part["Xv"] @ beta[:, None]
            quadratic += float(np.sum(residual * residual_v))
            part["residual_v"] = residual_v

        if self.reml:
            logdet_A = 2.0 * np.sum(np.log(np.diag(A_factor[0])))
            value = 0.5 * ((self.n_obs - self.p) * LOG_2PI + logdet + quadratic + logdet_A)
        else:
            value = 0.5 * (self.n_obs * LOG_2PI + logdet + quadratic)

        grad = None
        if gradient:
            grad = np.zeros(theta.size)
            for part in parts:
                n = part["Xv"].shape[0]
                W = cho_solve(part["factor"], np.eye(n))
                residual_v = part["residual_v"]
                M = part["m"] * W - residual_v @ residual_v.T
                if self.reml:
                    M -= part["m"] * (part["Xv"] @ beta_cov @ part["Xv"].T)
                if part["dVs"]:
                    grad += 0.5 * np.einsum("ij,kij->k", M, np.asarray(part["dVs"]))
        return Evaluation(float(value), beta, grad, beta_cov)

    def value(self, theta):
        return self.evaluate(theta).value

    def gradient(self, theta):
        return self.evaluate(theta, gradient=True).gradient

    def marker_response_variances(self):
        """Sample variance of the responses of each marker."""
        variances = []
        for k in range(2):
            values = np.concatenate([d.y[d.marker_of_row == k] for d in self.designs])
            variances.append(float(np.var(values)) if values.size > 1 else 0.0)
        return np.array(variances)

    def start_values(self):
        """
        Deterministic start on the unconstrained scale.

        OLS residual variance per marker is split equally over the stochastic
        components present. G and C start diagonal and rho starts at 0.1.
        """
        X = np.vstack([d.X for d in self.designs])
        y = np.concatenate([d.y for d in self.designs])
        markers = np.concatenate([d.marker_of_row for d in self.designs])
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        residual = y - X @ beta
        cov = self.cov
        components = int(cov.has_random) + int(cov.has_serial) + int(cov.has_error)

        shares = np.zeros(2)
        spread = self.marker_response_variances()
        for k in range(2):
            values = residual[markers == k]
            s2 = float(np.mean(values ** 2)) if values.size else 0.0
            floor = 1e-6 * (spread[k] if spread[k] > 0 else 1.0)
            shares[k] = max(s2, floor) / components

        G = None
        if cov.has_random:
            Z = np.vstack([d.Z for d in self.designs])
            diagonal = []
            for j in range(cov.dim):
                k = j // cov.q
                column = Z[markers == k, j]
                scale = float(np.mean(column ** 2)) if column.size else 0.0
                diagonal.append(START_FRACTION * shares[k] / (scale if scale > 0 else 1.0))
            G = np.diag(diagonal)
        serial = KroneckerAR1(C=np.diag(shares), rho=START_RHO) if cov.has_serial else None
        errors = shares if cov.has_error else None
        return cov.to_unconstrained(cov.natural_from_components(G, serial, errors))


def profiled_negloglik(theta, designs, spec, marker_names=DEFAULT_MARKER_NAMES):
    """
    Negative (RE)ML log-likelihood with the fixed effects profiled out by GLS.

    Args:
        theta: Unconstrained covariance parameter vector
        designs: Sequence of SubjectDesign
        spec: ModelSpec

    Returns:
        Tuple (negloglik, beta_gls)

    Raises:
        CovarianceEvaluationError: If a subject's V is not positive definite
        RankDeficiencyError: If the fixed-effects design is singular
    """
    evaluation = LikelihoodEvaluator(designs, spec, marker_names).evaluate(theta)
    return evaluation.value, evaluation.beta


def objective_gradient(theta, designs, spec, marker_names=DEFAULT_MARKER_NAMES):
    """Analytic gradient of ``profiled_negloglik`` with respect to theta."""
    return LikelihoodEvaluator(designs, spec, marker_names).evaluate(theta, gradient=True).gradient


def _safe_objective(evaluator, numeric):
    """Objective and gradient for the optimizer; infinite outside the valid region."""
    def objective(theta):
        try:
            if numeric:
                value = evaluator.value(theta)
                return value, central_gradient(evaluator.value, theta)
            evaluation = evaluator.evaluate(theta, gradient=True)
            return evaluation.value, evaluation.gradient
        except CovarianceEvaluationError as e:
            logger.debug("Objective undefined at theta=%s: %s", theta, e)
            return np.inf, np.zeros_like(theta)
    return objective


def gradient_converged(gradient_norm, value, tolerance):
    """Scale-aware first-order test: ||g|| <= tolerance * max(1, |f|)."""
    return gradient_norm <= tolerance * max(1.0, abs(value))


def _newton_polish(evaluator, theta, value, options, gradient_fn):
    """
    Newton steps with a finite-difference Hessian of the gradient and step halving.

    Stops at a stationary point, when the relative objective change drops
    below the tolerance, or as soon as no step length lowers the objective.
    """
    steps = 0
    relative_change = math.nan
    for _ in range(options.newton_steps):
        grad = gradient_fn(theta)
        if gradient_converged(np.linalg.norm(grad), value, options.gradient_tolerance):
            break
        try:
            H = hessian_from_gradient(gradient_fn, theta)
            direction = -cho_solve(cho_factor(H, lower=True), grad)
        except (LinAlgError, CovarianceEvaluationError):
            break
        length = 1.0
        for _ in range(MAX_STEP_HALVINGS):
            candidate = theta + length * direction
            try:
                candidate_value = evaluator.value(candidate)
            except CovarianceEvaluationError:
                candidate_value = math.inf
            if candidate_value < value:
                break
            length *= 0.5
        else:
            logger.debug("Newton polishing stopped: no step lowers the objective")
            break
        relative_change = (value - candidate_value) / max(1.0, abs(value))
        theta, value = candidate, candidate_value
        steps += 1
        logger.debug("Newton step %d: objective %.12g", steps, value)
        if relative_change < options.objective_tolerance:
            break
    return theta, value, steps, relative_change


def fit_designs(designs, spec, options=FitOptions(), marker_names=DEFAULT_MARKER_NAMES):
    """
    Fit a model to prebuilt subject designs.

    Args:
        designs: Sequence of SubjectDesign
        spec: ModelSpec
        options: FitOptions
        marker_names: Marker display names used in parameter names

    Returns:
        FitResult (non-convergence is reported, not raised)

    Raises:
        InvalidArgumentError: Empty data or bad start vector
        RankDeficiencyError: Collinear fixed-effects columns
    """
    evaluator = LikelihoodEvaluator(designs, spec, marker_names, options.workers)
    cov = evaluator.cov
    numeric = options.gradient == "numeric"
    if options.gradient not in ("analytic", "numeric"):
        raise InvalidArgumentError(f"Unknown gradient option: {options.gradient!r}")

    if options.start is not None:
        theta0 = np.asarray(options.start, dtype=float)
        if theta0.shape != (cov.n_params,):
            raise InvalidArgumentError(f"start must have {cov.n_params} entries")
    else:
        theta0 = evaluator.start_values()

    def gradient_fn(theta):
        if numeric:
            return central_gradient(evaluator.value, theta)
        return evaluator.gradient(theta)

    logger.debug("Fitting %s model with %d covariance parameters", spec.method.value, cov.n_params)
    if cov.n_params:
        try:
            scale = max(1.0, abs(evaluator.value(theta0)))
        except CovarianceEvaluationError as e:
            raise InvalidArgumentError(f"Start values give an invalid covariance: {e}") from e
        optimum = minimize(
            _safe_objective(evaluator, numeric),
            theta0,
            jac=True,
            method="BFGS",
            options={"maxiter": options.max_iterations, "gtol": options.gradient_tolerance * scale},
        )
        theta, value, iterations, message = optimum.x, optimum.fun, int(optimum.nit), optimum.message
        if not np.isfinite(value):
            theta, value = theta0, evaluator.value(theta0)
        theta, value, newton_steps, relative_change = _newton_polish(
            evaluator, theta, value, options, gradient_fn
        )
        iterations += newton_steps
    else:
        theta, iterations, relative_change, message = theta0, 0, 0.0, "no covariance parameters"

    evaluation = evaluator.evaluate(theta, gradient=not numeric)
    grad = gradient_fn(theta) if numeric else evaluation.gradient
    gradient_norm = float(np.linalg.norm(grad)) if grad is not None and grad.size else 0.0

    try:
        H = hessian_from_gradient(gradient_fn, theta) if cov.n_params else np.zeros((0, 0))
        hessian_pd = cov.n_params == 0 or is_positive_definite(H)
    except CovarianceEvaluationError:
        H, hessian_pd = np.full((cov.n_params, cov.n_params), np.nan), False

    converged = gradient_converged(gradient_norm, evaluation.value, options.gradient_tolerance) \
        and hessian_pd
    natural = cov.natural(theta)
    se_theta = np.full(cov.n_params, np.nan)
    if hessian_pd and cov.n_params:
        theta_cov = np.linalg.inv(H)
        J = central_jacobian(cov.natural, theta)
        se_theta = np.sqrt(np.clip(np.diag(J @ theta_cov @ J.T), 0.0, None))
    se_beta = np.sqrt(np.clip(np.diag(evaluation.beta_cov), 0.0, None))

    intervals = tuple(
        wald_interval(estimate, se, INTERVAL_TRANSFORMS[kind])
        for estimate, se, kind in zip(natural, se_theta, cov.kinds)
    )

    G, residual = cov.unpack(theta)
    spread = evaluator.marker_response_variances()
    boundary = tuple(
        name
        for name, kind, marker, estimate in zip(cov.names, cov.kinds, cov.markers, natural)
        if kind == "variance" and estimate < BOUNDARY_FRACTION * max(spread[marker], 1e-300)
    )

    warnings = []
    if not converged:
        warnings.append(
            f"did not converge (gradient norm {gradient_norm:.3g}, "
            f"Hessian positive definite: {hessian_pd})"
        )
    if boundary:
        warnings.append("estimates at the boundary: " + ", ".join(boundary))
    rho_hat = None
    if residual.serial is not None:
        rho_hat = tuple(float(r) for r in np.atleast_1d(residual.serial.rho))
        weak = [r for r in rho_hat if abs(r) < RHO_IDENTIFIABILITY]
        if weak:
            warnings.append(
                f"rho estimate {weak[0]:.3g} is near zero; serial and error components "
                "are weakly identified"
            )
    for warning in warnings:
        logger.warning("%s model: %s", spec.method.value, warning)

    log_likelihood = -float(evaluation.value)
    parameter_count = evaluator.p + cov.n_params
    return FitResult(
        spec=spec,
        beta_names=evaluator.beta_names,
        beta_hat=evaluation.beta,
        se_beta=se_beta,
        theta_names=cov.names,
        theta_hat=natural,
        se_theta=se_theta,
        theta_intervals=intervals,
        theta_unconstrained=theta,
        G_hat=None if G is None else G.G,
        C_hat=None if residual.serial is None else np.asarray(residual.serial.C),
        rho_hat=rho_hat,
        error_variances=None if residual.error is None else tuple(residual.error.variances),
        log_likelihood=log_likelihood,
        parameter_count=parameter_count,
        aic=aic(log_likelihood, parameter_count),
        converged=bool(converged),
        iterations=iterations,
        gradient_norm=gradient_norm,
        relative_change=float(relative_change),
        hessian_positive_definite=bool(hessian_pd),
        boundary=boundary,
        warnings=tuple(warnings),
        message=str(message),
        n_subjects=len(evaluator.designs),
        n_observations=evaluator.n_obs,
    )


def fit(dataset, spec, options=FitOptions()):
    """
    Fit a bivariate mixed model to a stacked dataset.

    Args:
        dataset: StackedDataset
        spec: ModelSpec
        options: FitOptions

    Returns:
        FitResult

    Raises:
        InvalidArgumentError: If the dataset is empty
        RankDeficiencyError: If the fixed-effects design is not of full rank

    Example:
        >>> result = fit(dataset, ModelSpec())
        >>> result.converged, result.aic
    """
    if not dataset.records:
        raise InvalidArgumentError("Cannot fit a model to an empty dataset")
    designs = build_design(dataset, spec.design)
    return fit_designs(designs, spec, options, dataset.marker_names)
