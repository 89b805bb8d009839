"""Covariance structures of the bivariate mixed model.

Three components are assembled into the marginal covariance of a subject:

    V = Z G Z' + R + diag(sigma2_eps[marker of row])

G is unstructured (log-Cholesky parameterised), R follows the Kronecker
UN x AR(1) rule ``Cov(w_k(j), w_l(m)) = C[k, l] * rho ** |j - m|`` with lags
taken from occasion indices (so intermittent gaps count), and the
measurement error variance is grouped by marker.
"""

import logging
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor

from bivariate_lmm.config import CONDITION_LIMIT, DEFAULT_MARKER_NAMES
from bivariate_lmm.errors import (
    CovarianceEvaluationError,
    DimensionMismatchError,
    InvalidArgumentError,
    NearSingularCovarianceError,
)
from bivariate_lmm.models import RandomEffects, ResidualVariant
from bivariate_lmm.utils import lower_indices, n_lower

logger = logging.getLogger(__name__)


class RandomEffectsCov(NamedTuple):
    """Random-effects covariance G with its unconstrained parameters."""
    dim: int
    theta_g: np.ndarray
    G: np.ndarray
    independent: bool = False


class KroneckerAR1(NamedTuple):
    """Serial process: marker covariance C with AR(1) correlation over occasions.

    ``rho`` is a single coefficient shared by both markers. When the markers
    are independent (C diagonal) it may instead be a pair, one per marker.
    """
    C: np.ndarray
    rho: object

    def marker_rho(self):
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        return np.repeat(rho, 2) if rho.size == 1 else rho

    def validate(self):
        """
        Raises:
            InvalidArgumentError: If C is not a symmetric PSD 2x2 matrix or |rho| >= 1
        """
        C = np.asarray(self.C, dtype=float)
        if C.shape != (2, 2) or not np.allclose(C, C.T):
            raise InvalidArgumentError(f"C must be a symmetric 2x2 matrix, got {C.tolist()}")
        if np.linalg.eigvalsh(C)[0] < -1e-12 * max(1.0, np.abs(C).max()):
            raise InvalidArgumentError("C must be positive semi-definite")
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if rho.size not in (1, 2) or np.any(np.abs(rho) >= 1):
            raise InvalidArgumentError(f"rho must lie in (-1, 1), got {self.rho}")
        if rho.size == 2 and C[0, 1] != 0:
            raise InvalidArgumentError("Per-marker rho requires independent markers (diagonal C)")
        return self


class GroupedDiagonalError(NamedTuple):
    """Measurement error variances, one per marker."""
    sigma2_eps1: float
    sigma2_eps2: float

    @property
    def variances(self):
        return np.array([self.sigma2_eps1, self.sigma2_eps2], dtype=float)


class ResidualStructure(NamedTuple):
    """Residual part of the marginal covariance: serial process and/or error."""
    variant: ResidualVariant
    serial: Optional[KroneckerAR1] = None
    error: Optional[GroupedDiagonalError] = None

    @property
    def parameter_count(self):
        return {
            ResidualVariant.GROUPED_DIAGONAL: 2,
            ResidualVariant.AR1_ERROR: 6,
            ResidualVariant.AR1: 4,
        }[self.variant]


def _log_cholesky(theta, dim):
    rows, cols = lower_indices(dim)
    L = np.zeros((dim, dim))
    L[rows, cols] = theta
    diagonal = rows == cols
    L[rows[diagonal], cols[diagonal]] = np.exp(theta[diagonal])
    return L


def block_covariance(theta, blocks, derivatives=False):
    """
    Block-diagonal covariance from concatenated log-Cholesky vectors.

    Args:
        theta: Unconstrained vector, sum of n_lower(b) over blocks
        blocks: Block sizes
        derivatives: Also return dM/dtheta_j for every entry of theta

    Returns:
        Tuple (M, dMs); dMs is an empty list unless derivatives is True
    """
    theta = np.asarray(theta, dtype=float)
    total = sum(blocks)
    M = np.zeros((total, total))
    dMs = []
    dim_start = par_start = 0
    for size in blocks:
        count = n_lower(size)
        L = _log_cholesky(theta[par_start:par_start + count], size)
        span = slice(dim_start, dim_start + size)
        M[span, span] = L @ L.T
        if derivatives:
            for a, c in zip(*lower_indices(size)):
                dL = np.zeros((size, size))
                dL[a, c] = L[a, c] if a == c else 1.0
                piece = dL @ L.T
                dM = np.zeros((total, total))
                dM[span, span] = piece + piece.T
                dMs.append(dM)
        dim_start += size
        par_start += count
    return M, dMs


def block_entries(M, blocks):
    """Lower-triangle entries of each diagonal block, concatenated."""
    parts = []
    start = 0
    for size in blocks:
        block = M[start:start + size, start:start + size]
        rows, cols = lower_indices(size)
        parts.append(block[rows, cols])
        start += size
    return np.concatenate(parts) if parts else np.zeros(0)


def block_from_entries(entries, blocks):
    """Inverse of ``block_entries``: rebuild the symmetric block-diagonal matrix."""
    total = sum(blocks)
    M = np.zeros((total, total))
    start = used = 0
    for size in blocks:
        rows, cols = lower_indices(size)
        count = n_lower(size)
        block = np.zeros((size, size))
        block[rows, cols] = entries[used:used + count]
        block[cols, rows] = entries[used:used + count]
        M[start:start + size, start:start + size] = block
        start += size
        used += count
    return M


def block_log_cholesky(M, blocks):
    """
    Log-Cholesky vector of a block-diagonal positive definite matrix.

    Raises:
        InvalidArgumentError: If a block is not positive definite
    """
    parts = []
    start = 0
    for size in blocks:
        block = np.asarray(M, dtype=float)[start:start + size, start:start + size]
        try:
            L = np.linalg.cholesky(block)
        except np.linalg.LinAlgError as e:
            raise InvalidArgumentError(f"Covariance block is not positive definite: {block.tolist()}") from e
        rows, cols = lower_indices(size)
        values = L[rows, cols].copy()
        diagonal = rows == cols
        values[diagonal] = np.log(values[diagonal])
        parts.append(values)
        start += size
    return np.concatenate(parts) if parts else np.zeros(0)


def g_blocks(dim, independence_mask=False):
    """Block sizes of G: one full block, or one block per marker when masked."""
    if not independence_mask:
        return [dim]
    if dim % 2:
        raise InvalidArgumentError(f"Masked G needs an even dimension, got {dim}")
    return [dim // 2, dim // 2]


def g_from_theta(theta_g, dim, independence_mask=False):
    """
    Build the random-effects covariance from its log-Cholesky parameters.

    G = L L' with diag(L) = exp(theta diagonal entries). With the independence
    mask the cross-marker block of L is fixed at zero, so G is block-diagonal
    and theta_g holds only the free within-marker entries.

    Args:
        theta_g: Unconstrained vector (dim(dim+1)/2 entries, or 2*h(h+1)/2 with h=dim/2 if masked)
        dim: Dimension of G (q1 + q2)
        independence_mask: Force the cross-marker block to zero

    Returns:
        RandomEffectsCov

    Raises:
        InvalidArgumentError: If theta_g has the wrong length
    """
    blocks = g_blocks(dim, independence_mask)
    theta_g = np.asarray(theta_g, dtype=float)
    expected = sum(n_lower(size) for size in blocks)
    if theta_g.shape != (expected,):
        raise InvalidArgumentError(f"theta_g must have {expected} entries, got {theta_g.size}")
    G, _ = block_covariance(theta_g, blocks)
    return RandomEffectsCov(dim=dim, theta_g=theta_g, G=G, independent=independence_mask)


def _lags(occasions):
    occasions = np.asarray(occasions, dtype=float)
    return np.abs(occasions[:, None] - occasions[None, :])


def _ar1_powers(rho_by_marker, markers, lag):
    base = np.broadcast_to(np.asarray(rho_by_marker)[markers][:, None], lag.shape)
    return np.power(base, lag), base


def serial_cov_rows(serial, markers, occasions):
    """
    Serial covariance for arbitrary labelled rows.

    Entry (r, s) is C[marker_r, marker_s] * rho ** |occasion_r - occasion_s|.
    """
    markers = np.asarray(markers, dtype=int)
    lag = _lags(occasions)
    powers, _ = _ar1_powers(serial.marker_rho(), markers, lag)
    return np.asarray(serial.C, dtype=float)[np.ix_(markers, markers)] * powers


def _check_occasions(occasions, label):
    occasions = list(occasions)
    for value in occasions:
        if int(value) != value or value < 0:
            raise InvalidArgumentError(f"{label} occasions must be non-negative integers, got {occasions}")
    if any(b <= a for a, b in zip(occasions, occasions[1:])):
        raise InvalidArgumentError(f"{label} occasions must be sorted ascending, got {occasions}")
    return [int(value) for value in occasions]


def build_serial_cov(k, occasions_m1, occasions_m2):
    """
    Serial covariance of one subject, marker-1 rows first.

    With identical complete occasion sets this is C kron AR1(rho). With gaps
    the lag between two rows is the difference of their occasion indices,
    not of their positions.

    Args:
        k: KroneckerAR1
        occasions_m1: Ascending occasion indices observed for marker 1
        occasions_m2: Ascending occasion indices observed for marker 2

    Returns:
        Square matrix of size len(occasions_m1) + len(occasions_m2)

    Raises:
        InvalidArgumentError: If occasions are unsorted, repeated or negative
    """
    first = _check_occasions(occasions_m1, "Marker 1")
    second = _check_occasions(occasions_m2, "Marker 2")
    markers = np.array([0] * len(first) + [1] * len(second), dtype=int)
    return serial_cov_rows(k, markers, first + second)


def build_marginal_cov(design, G, res):
    """
    Marginal covariance V = Z G Z' + R + Sigma of one subject.

    Args:
        design: SubjectDesign
        G: RandomEffectsCov or None (no random effects)
        res: ResidualStructure

    Returns:
        Symmetric matrix of size design.n_rows

    Raises:
        DimensionMismatchError: If the design rows, Z columns and G disagree
    """
    n = len(design.y)
    markers = np.asarray(design.marker_of_row, dtype=int)
    if design.Z.shape[0] != n or len(markers) != n or len(design.occasion_of_row) != n:
        raise DimensionMismatchError(
            f"Design of subject {design.subject_id!r} has inconsistent row counts"
        )
    V = np.zeros((n, n))
    if G is not None:
        if design.Z.shape[1] != G.G.shape[0]:
            raise DimensionMismatchError(
                f"Z has {design.Z.shape[1]} columns but G is {G.G.shape[0]}x{G.G.shape[0]}"
            )
        V += design.Z @ G.G @ design.Z.T
    if res.serial is not None:
        V += serial_cov_rows(res.serial, markers, design.occasion_of_row)
    if res.error is not None:
        V += np.diag(res.error.variances[markers])
    return 0.5 * (V + V.T)


def factor_marginal_cov(V, subject_id=None):
    """
    Cholesky factor of a marginal covariance, refusing near-singular matrices.

    Args:
        V: Symmetric matrix
        subject_id: Reported in errors

    Returns:
        ``scipy.linalg.cho_factor`` output (lower triangular)

    Raises:
        CovarianceEvaluationError: If V is not finite or not positive definite
        NearSingularCovarianceError: If the condition number exceeds 1e12
    """
    if not np.all(np.isfinite(V)):
        raise CovarianceEvaluationError(subject_id)
    eigenvalues = np.linalg.eigvalsh(V)
    if eigenvalues[0] <= 0:
        raise CovarianceEvaluationError(subject_id)
    condition = eigenvalues[-1] / eigenvalues[0]
    if condition > CONDITION_LIMIT:
        raise NearSingularCovarianceError(subject_id, condition)
    try:
        return cho_factor(V, lower=True)
    except LinAlgError as e:
        raise CovarianceEvaluationError(subject_id) from e


class CovarianceModel:
    """Parameter layout of a model's covariance and its assembly per subject.

    The unconstrained vector theta is laid out as
    [G log-Cholesky | C log-Cholesky | atanh(rho) | log(sigma2_eps)], each part
    present only if the model has that component. The natural vector has the
    same length and order: G entries, C entries, rho, error variances.
    """

    def __init__(self, spec, marker_names=DEFAULT_MARKER_NAMES):
        spec.validate()
        self.spec = spec
        self.marker_names = tuple(marker_names)
        self.q = spec.design.terms_per_marker
        self.dim = 2 * self.q
        self.independent = bool(spec.independent)
        self.has_random = spec.random_effects is RandomEffects.SLOPES
        self.has_serial = spec.residual.has_serial
        self.has_error = spec.residual.has_error

        self.g_blocks = g_blocks(self.dim, self.independent) if self.has_random else []
        self.c_blocks = ([1, 1] if self.independent else [2]) if self.has_serial else []
        n_g = sum(n_lower(size) for size in self.g_blocks)
        n_c = sum(n_lower(size) for size in self.c_blocks)
        n_rho = (2 if self.independent else 1) if self.has_serial else 0
        n_err = 2 if self.has_error else 0

        self.g_slice = slice(0, n_g)
        self.c_slice = slice(n_g, n_g + n_c)
        self.rho_slice = slice(n_g + n_c, n_g + n_c + n_rho)
        self.err_slice = slice(n_g + n_c + n_rho, n_g + n_c + n_rho + n_err)
        self.n_params = n_g + n_c + n_rho + n_err
        self.names, self.kinds, self.markers = self._describe()

    def _describe(self):
        names, kinds, markers = [], [], []
        terms = self.spec.design.term_names
        labels = [f"{m}:{t}" for m in self.marker_names for t in terms]
        start = 0
        for size in self.g_blocks:
            for a, c in zip(*lower_indices(size)):
                names.append(f"G({labels[start + a]},{labels[start + c]})")
                kinds.append("variance" if a == c else "covariance")
                markers.append((start + a) // self.q)
            start += size
        start = 0
        for size in self.c_blocks:
            for a, c in zip(*lower_indices(size)):
                names.append(f"C({self.marker_names[start + a]},{self.marker_names[start + c]})")
                kinds.append("variance" if a == c else "covariance")
                markers.append(start + a)
            start += size
        if self.has_serial:
            if self.independent:
                names.extend(f"rho({m})" for m in self.marker_names)
                markers.extend([0, 1])
                kinds.extend(["correlation"] * 2)
            else:
                names.append("rho")
                markers.append(None)
                kinds.append("correlation")
        if self.has_error:
            names.extend(f"sigma2_eps({m})" for m in self.marker_names)
            kinds.extend(["variance"] * 2)
            markers.extend([0, 1])
        return tuple(names), tuple(kinds), tuple(markers)

    def _rho(self, theta):
        return np.tanh(np.asarray(theta, dtype=float)[self.rho_slice])

    def unpack(self, theta):
        """
        Split theta into natural-scale components.

        Returns:
            Tuple (RandomEffectsCov or None, ResidualStructure)
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatchError(f"theta must have {self.n_params} entries, got {theta.size}")
        G = None
        if self.has_random:
            G = g_from_theta(theta[self.g_slice], self.dim, self.independent)
        serial = None
        if self.has_serial:
            C, _ = block_covariance(theta[self.c_slice], self.c_blocks)
            rho = self._rho(theta)
            serial = KroneckerAR1(C=C, rho=tuple(rho) if self.independent else float(rho[0]))
        error = None
        if self.has_error:
            error = GroupedDiagonalError(*np.exp(theta[self.err_slice]))
        return G, ResidualStructure(self.spec.residual, serial, error)

    def natural(self, theta):
        """Natural-scale parameter vector (same order as ``names``)."""
        theta = np.asarray(theta, dtype=float)
        parts = []
        if self.has_random:
            G, _ = block_covariance(theta[self.g_slice], self.g_blocks)
            parts.append(block_entries(G, self.g_blocks))
        if self.has_serial:
            C, _ = block_covariance(theta[self.c_slice], self.c_blocks)
            parts.append(block_entries(C, self.c_blocks))
            parts.append(self._rho(theta))
        if self.has_error:
            parts.append(np.exp(theta[self.err_slice]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def to_unconstrained(self, natural):
        """
        Inverse of ``natural``.

        Raises:
            InvalidArgumentError: If a covariance block is not positive definite,
                |rho| >= 1 or a variance is not positive
        """
        natural = np.asarray(natural, dtype=float)
        if natural.shape != (self.n_params,):
            raise DimensionMismatchError(f"natural vector must have {self.n_params} entries")
        parts = []
        if self.has_random:
            G = block_from_entries(natural[self.g_slice], self.g_blocks)
            parts.append(block_log_cholesky(G, self.g_blocks))
        if self.has_serial:
            C = block_from_entries(natural[self.c_slice], self.c_blocks)
            parts.append(block_log_cholesky(C, self.c_blocks))
            rho = natural[self.rho_slice]
            if np.any(np.abs(rho) >= 1):
                raise InvalidArgumentError(f"rho must lie in (-1, 1), got {rho.tolist()}")
            parts.append(np.arctanh(rho))
        if self.has_error:
            variances = natural[self.err_slice]
            if np.any(variances <= 0):
                raise InvalidArgumentError(f"Error variances must be positive, got {variances.tolist()}")
            parts.append(np.log(variances))
        return np.concatenate(parts) if parts else np.zeros(0)

    def natural_from_components(self, G=None, serial=None, errors=None):
        """
        Natural vector from component matrices (used for simulation truths).

        Args:
            G: Random-effects covariance matrix (dim x dim) or None
            serial: KroneckerAR1 or None
            errors: Pair of error variances or None
        """
        parts = []
        if self.has_random:
            if G is None:
                raise InvalidArgumentError("Model has random effects but no G was given")
            parts.append(block_entries(np.asarray(G, dtype=float), self.g_blocks))
        if self.has_serial:
            if serial is None:
                raise InvalidArgumentError("Model has a serial process but no C/rho was given")
            parts.append(block_entries(np.asarray(serial.C, dtype=float), self.c_blocks))
            rho = serial.marker_rho()
            parts.append(rho if self.independent else rho[:1])
        if self.has_error:
            if errors is None:
                raise InvalidArgumentError("Model has measurement error but no variances were given")
            parts.append(np.asarray(errors, dtype=float))
        return np.concatenate(parts) if parts else np.zeros(0)

    def marginal_cov(self, design, theta, derivatives=False):
        """
        Marginal covariance of one design and, optionally, dV/dtheta_j.

        Args:
            design: SubjectDesign (only Z, marker and occasion labels are used)
            theta: Unconstrained parameter vector
            derivatives: Also return the list of derivative matrices

        Returns:
            Tuple (V, dVs) with dVs in theta order (empty unless requested)
        """
        theta = np.asarray(theta, dtype=float)
        markers = np.asarray(design.marker_of_row, dtype=int)
        n = len(markers)
        V = np.zeros((n, n))
        dVs = []

        if self.has_random:
            G, dGs = block_covariance(theta[self.g_slice], self.g_blocks, derivatives)
            Z = design.Z
            if Z.shape[1] != G.shape[0]:
                raise DimensionMismatchError(
                    f"Z has {Z.shape[1]} columns but G is {G.shape[0]}x{G.shape[0]}"
                )
            V += Z @ G @ Z.T
            dVs.extend(Z @ dG @ Z.T for dG in dGs)

        if self.has_serial:
            C, dCs = block_covariance(theta[self.c_slice], self.c_blocks, derivatives)
            rho = self._rho(theta)
            rho_by_marker = rho if rho.size == 2 else np.repeat(rho, 2)
            lag = _lags(design.occasion_of_row)
            powers, base = _ar1_powers(rho_by_marker, markers, lag)
            expanded = C[np.ix_(markers, markers)]
            V += expanded * powers
            if derivatives:
                dVs.extend(dC[np.ix_(markers, markers)] * powers for dC in dCs)
                dpowers = np.where(lag > 0, lag * np.power(base, np.maximum(lag - 1.0, 0.0)), 0.0)
                for k, value in enumerate(rho):
                    rows = markers == k if rho.size == 2 else np.ones(n, dtype=bool)
                    dVs.append(expanded * dpowers * (1.0 - value ** 2) * rows[:, None])

        if self.has_error:
            variances = np.exp(theta[self.err_slice])
            V += np.diag(variances[markers])
            if derivatives:
                for k in range(2):
                    dVs.append(np.diag(np.where(markers == k, variances[k], 0.0)))

        return 0.5 * (V + V.T), dVs
