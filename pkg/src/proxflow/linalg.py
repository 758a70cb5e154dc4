"""Dense matrix kernels: Stiefel projection via the polar-factor iteration,
log-determinants, and deterministic random number generation.

Matrices are plain float64 ``numpy.ndarray`` values. Random streams are
``numpy.random.Generator`` instances (PCG64); equal seeds give bitwise-equal
streams.
"""

import numpy as np

from .errors import ConvergenceError

DEFAULT_POLAR_TOL = 1e-10
DEFAULT_POLAR_MAX_ITER = 50


def make_rng(seed):
    """Deterministic generator; identical seed, identical stream."""
    return np.random.default_rng(seed)


def orth_defect(t):
    """Frobenius distance of t to the Stiefel manifold gram constraint.

    Orientation follows the shape: rows >= cols measures ||T^T T - I||_F,
    otherwise ||T T^T - I||_F. The training penalizer is the square of this.
    """
    t = np.asarray(t, dtype=float)
    rows, cols = t.shape
    if rows >= cols:
        gram = t.T @ t - np.eye(cols)
    else:
        gram = t @ t.T - np.eye(rows)
    return float(np.linalg.norm(gram))


def polar_project(t_tilde, tol=DEFAULT_POLAR_TOL, max_iter=DEFAULT_POLAR_MAX_ITER):
    """Orthogonal projection onto the Stiefel manifold.

    Runs the polar-factor iteration Y <- 2 Y (I + Y^T Y)^{-1} until the
    orientation-adjusted defect drops below ``tol``. Wide inputs
    (rows < cols) are handled by iterating on the transpose, so the result
    R satisfies R R^T = I instead of R^T R = I.

    Raises ConvergenceError when max_iter is hit (e.g. rank-deficient input,
    whose zero singular values are fixed points of the iteration).
    """
    t_tilde = np.asarray(t_tilde, dtype=float)
    if tol <= 0:
        raise ValueError("tol must be positive")
    rows, cols = t_tilde.shape
    if rows < cols:
        return polar_project(t_tilde.T, tol=tol, max_iter=max_iter).T

    eye = np.eye(cols)
    y = t_tilde
    defect = np.linalg.norm(y.T @ y - eye)
    for _ in range(max_iter):
        if defect <= tol:
            return y
        try:
            y = 2.0 * (y @ np.linalg.inv(eye + y.T @ y))
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(
                f"polar iteration hit a non-invertible I + Y^T Y: {exc}",
                residual=float(defect),
            ) from exc
        defect = np.linalg.norm(y.T @ y - eye)
    if defect <= tol:
        return y
    raise ConvergenceError(
        f"polar iteration did not reach tol={tol:g} in {max_iter} steps "
        f"(final defect {float(defect):.3e}); input may be rank-deficient",
        residual=float(defect),
        iterations=max_iter,
    )


def lu_logabsdet(m):
    """log|det m| via pivoted LU. Exactly singular input returns -inf."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    sign, logdet = np.linalg.slogdet(m)
    if sign == 0:
        return float("-inf")
    return float(logdet)
