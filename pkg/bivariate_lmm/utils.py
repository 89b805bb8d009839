"""Utility functions for bivariate_lmm."""

import math

import numpy as np

from bivariate_lmm.config import FINITE_DIFFERENCE_STEP, SIGNIFICANT_DIGITS


def lower_indices(dim):
    """
    Row and column indices of the lower triangle, row by row.

    The order is (0,0), (1,0), (1,1), (2,0), ... which is the order used for
    both the log-Cholesky vector and the natural covariance entries.

    Args:
        dim: Matrix dimension

    Returns:
        Tuple (rows, cols) of integer arrays of length dim*(dim+1)/2
    """
    rows, cols = [], []
    for i in range(dim):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def n_lower(dim):
    """Number of free entries of a symmetric dim x dim matrix."""
    return dim * (dim + 1) // 2


def format_number(value, digits=SIGNIFICANT_DIGITS):
    """
    Format a number for human-readable reports.

    Args:
        value: Number to format (None and NaN are allowed)
        digits: Significant digits

    Returns:
        Formatted string (e.g., "50386", "-0.404", "7.70e-05" style for tiny values)
    """
    if value is None:
        return "-"
    value = float(value)
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Inf" if value > 0 else "-Inf"
    text = f"{value:.{digits}g}"
    if text == "-0":
        text = "0"
    return text


def format_p_value(p_value, floor=1e-4):
    """Format a p-value, printing tiny values as a threshold like "<1e-04"."""
    if p_value is None or math.isnan(p_value):
        return "NaN"
    if p_value < floor:
        return f"<{floor:.0e}"
    return f"{p_value:.4f}"


def fd_step(x):
    """Central-difference step per coordinate."""
    return FINITE_DIFFERENCE_STEP * (1.0 + np.abs(x))


def central_gradient(func, x, step=None):
    """
    Central finite-difference gradient of a scalar function.

    Args:
        func: Callable taking a 1-D array and returning a float
        x: Evaluation point
        step: Optional array of steps (default: 1e-5 * (1 + |x|))

    Returns:
        Gradient array with the shape of x
    """
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if step is None else np.broadcast_to(step, x.shape)
    grad = np.empty_like(x)
    for j in range(x.size):
        forward, backward = x.copy(), x.copy()
        forward[j] += h[j]
        backward[j] -= h[j]
        grad[j] = (func(forward) - func(backward)) / (2.0 * h[j])
    return grad


def central_jacobian(func, x, step=None):
    """
    Central finite-difference Jacobian of a vector function.

    Args:
        func: Callable mapping a 1-D array to a 1-D array
        x: Evaluation point
        step: Optional array of steps

    Returns:
        Matrix with shape (len(func(x)), len(x))
    """
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if step is None else np.broadcast_to(step, x.shape)
    columns = []
    for j in range(x.size):
        forward, backward = x.copy(), x.copy()
        forward[j] += h[j]
        backward[j] -= h[j]
        columns.append((np.asarray(func(forward)) - np.asarray(func(backward))) / (2.0 * h[j]))
    return np.column_stack(columns) if columns else np.zeros((0, 0))


def hessian_from_gradient(grad, x, step=None):
    """Symmetrised central-difference Hessian built from an analytic gradient."""
    H = central_jacobian(grad, x, step)
    return 0.5 * (H + H.T)


def symmetric_factor(M):
    """
    Return A with A @ A.T == M for a symmetric positive semi-definite M.

    Uses the eigen-decomposition so singular matrices (e.g. G = 0) are fine.
    Tiny negative eigenvalues from rounding are clipped to zero.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return M.copy()
    values, vectors = np.linalg.eigh(0.5 * (M + M.T))
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def is_positive_definite(M):
    """True if the symmetric matrix M admits a Cholesky factorisation."""
    try:
        np.linalg.cholesky(np.asarray(M, dtype=float))
    except np.linalg.LinAlgError:
        return False
    return True
