"""Small dense linear algebra helpers.

Everything here works on float64 numpy arrays. Power iterations start from
the normalized all-ones vector so results are reproducible run to run.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 1000


class DegenerateAtomError(ValueError):
    """Raised when a residual matrix is numerically zero."""


class SingularGramError(np.linalg.LinAlgError):
    """Raised when a Gram matrix fails its Cholesky factorization."""


class PowerResult(NamedTuple):
    value: float
    vector: np.ndarray
    iterations: int
    converged: bool


def as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    return A


def matvec(A, v) -> np.ndarray:
    A = as_matrix(A)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {v.shape}")
    return A @ v


def _power_iteration(M: np.ndarray, x: np.ndarray, max_iters: int, tol: float) -> PowerResult:
    """Power iteration on a symmetric PSD matrix, Rayleigh-quotient stopping."""
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        x = np.ones(M.shape[0])
        nrm = np.linalg.norm(x)
    x = x / nrm
    rq = float(x @ M @ x)
    for it in range(1, max_iters + 1):
        y = M @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return PowerResult(0.0, x, it, True)
        x = y / ny
        new_rq = float(x @ M @ x)
        if abs(new_rq - rq) <= tol * max(abs(new_rq), np.finfo(float).tiny):
            return PowerResult(new_rq, x, it, True)
        rq = new_rq
    return PowerResult(rq, x, max_iters, False)


def spectral_norm_sq(A, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                     full_output: bool = False):
    """Largest eigenvalue of ``A.T @ A`` by power iteration.

    The iteration runs on ``A.T @ A`` itself, starting from the normalized
    all-ones vector of length ``A.shape[1]``. (Iterating on the smaller
    ``A @ A.T`` instead can stall: for a mean-removed DCT dictionary the
    all-ones patch is an eigenvector of ``D @ D.T`` with eigenvalue 1.)

    Args:
        A: 2-D array.
        max_iters: iteration cap.
        tol: relative change of the Rayleigh quotient that counts as converged.
        full_output: if True return a :class:`PowerResult` instead of a float.
    """
    if max_iters < 1 or tol <= 0:
        raise ValueError("max_iters must be >= 1 and tol > 0")
    A = as_matrix(A)
    res = _power_iteration(A.T @ A, np.ones(A.shape[1]), max_iters, tol)
    if not res.converged:
        warnings.warn(f"power iteration did not converge in {max_iters} iterations",
                      RuntimeWarning, stacklevel=2)
    return res if full_output else res.value


def _fix_sign(u: np.ndarray, v: np.ndarray):
    nz = np.flatnonzero(np.abs(u) > 1e-12 * max(np.abs(u).max(), 1e-300))
    if nz.size and u[nz[0]] < 0:
        return -u, -v
    return u, v


def leading_singular_triplet(E, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                             start=None):
    """Best rank-1 approximation ``s * outer(u, v)`` of ``E``.

    ``start`` optionally seeds the iteration with a guess for ``u``; the
    default is the normalized all-ones vector. The returned ``u`` has its
    first nonzero entry positive.

    Raises:
        DegenerateAtomError: if ``||E||_F <= tol``.
    """
    E = as_matrix(E)
    if np.linalg.norm(E) <= tol:
        raise DegenerateAtomError("residual matrix is numerically zero")
    x0 = np.ones(E.shape[0]) if start is None else np.asarray(start, dtype=np.float64)
    res = _power_iteration(E @ E.T, x0, max_iters, tol)
    u = res.vector
    v = E.T @ u
    s = float(np.linalg.norm(v))
    if s == 0.0:
        raise DegenerateAtomError("power iteration landed in the null space")
    v = v / s
    u, v = _fix_sign(u, v)
    return u, s, v


def solve_posdef(G, b) -> np.ndarray:
    """Solve ``G x = b`` for symmetric positive-definite ``G`` via Cholesky.

    Raises:
        SingularGramError: if the factorization hits a non-positive pivot.
    """
    G = as_matrix(G)
    b = np.asarray(b, dtype=np.float64)
    try:
        factor = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularGramError(f"Gram matrix is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)
