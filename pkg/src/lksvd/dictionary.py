"""Overcomplete DCT dictionaries and the K-SVD atom update."""

from __future__ import annotations

import math

import numpy as np

from .linalg import DegenerateAtomError, leading_singular_triplet


REPLACE_RTOL = 1e-12


def _isqrt_exact(n: int, name: str) -> int:
    r = math.isqrt(n)
    if n < 1 or r * r != n:
        raise ValueError(f"{name} must be a perfect square, got {n}")
    return r


def dct_1d(side: int, n_atoms: int, remove_mean: bool = True) -> np.ndarray:
    """``side x n_atoms`` cosine frame with unit-norm columns.

    Column ``k`` samples ``cos(pi * (i + 1/2) * k / n_atoms)`` at pixels
    ``i = 0..side-1``; with ``n_atoms == side`` and no mean removal this is
    the orthonormal DCT-II basis.
    """
    i = np.arange(side)[:, None] + 0.5
    k = np.arange(n_atoms)[None, :]
    D = np.cos(np.pi * i * k / n_atoms)
    if remove_mean:
        D[:, 1:] -= D[:, 1:].mean(axis=0)
    return D / np.linalg.norm(D, axis=0)


def overcomplete_dct(p: int, m: int, remove_mean: bool = True) -> np.ndarray:
    """Separable overcomplete 2-D DCT dictionary of shape ``(p, m)``.

    Built as the Kronecker square of a ``sqrt(p) x sqrt(m)`` cosine frame.
    Atom 0 is the constant patch. Row index ``r * sqrt(p) + c`` is pixel
    (r, c) of a row-major patch.
    """
    side = _isqrt_exact(p, "p")
    n1 = _isqrt_exact(m, "m")
    if m < p:
        raise ValueError(f"m ({m}) must be >= p ({p})")
    D1 = dct_1d(side, n1, remove_mean)
    D = np.kron(D1, D1)
    return D / np.linalg.norm(D, axis=0)


def normalize_atoms(D) -> np.ndarray:
    D = np.array(D, dtype=np.float64)
    norms = np.linalg.norm(D, axis=0)
    if np.any(norms == 0):
        raise ValueError("dictionary has an all-zero atom")
    return D / norms


def mutual_coherence(D) -> float:
    G = np.abs(D.T @ D)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def representation_error(D, patches, codes) -> float:
    """Total squared error ``sum_k ||D a_k - x_k||^2`` (patches and codes are row-wise)."""
    R = patches - codes @ D.T
    return float(np.sum(R * R))


def ksvd_update(D, patches, codes, usage_tol: float = 0.0):
    """One K-SVD sweep over all atoms in ascending index order.

    For every atom the error matrix restricted to the patches that use it
    (with the atom's own contribution added back) is replaced by its best
    rank-1 approximation, which updates the atom and its coefficients
    together. Atoms no patch uses are replaced by the currently
    worst-represented patch (lowest index on ties, each patch used at most
    once per sweep) unless that patch's error is below ``REPLACE_RTOL``
    times its energy. The power iteration is seeded with the current atom, so
    each replacement can only lower the total error.

    Args:
        D: ``(p, m)`` dictionary with unit-norm columns.
        patches: ``(n, p)`` data, one patch per row.
        codes: ``(n, m)`` current codes of ``patches`` over ``D``.

    Returns:
        ``(D_new, codes_new)``; the inputs are not modified.
    """
    D = np.array(D, dtype=np.float64)
    X = np.asarray(patches, dtype=np.float64)
    C = np.array(codes, dtype=np.float64)
    p, m = D.shape
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"patches must be (n, {p}), got {X.shape}")
    if C.shape != (X.shape[0], m):
        raise ValueError(f"codes must be {(X.shape[0], m)}, got {C.shape}")

    R = X - C @ D.T
    taken = np.zeros(X.shape[0], dtype=bool)
    for j in range(m):
        users = np.flatnonzero(np.abs(C[:, j]) > usage_tol)
        if users.size == 0:
            err = np.einsum("ij,ij->i", R, R)
            err[taken] = -1.0
            k = int(np.argmax(err))
            # round-off residuals of an exact fit do not count as error
            if err[k] > REPLACE_RTOL * float(X[k] @ X[k]):
                D[:, j] = X[k] / np.linalg.norm(X[k])
                taken[k] = True
            continue
        d_old = D[:, j].copy()
        a_old = C[users, j].copy()
        E = R[users] + np.outer(a_old, d_old)
        try:
            u, s, v = leading_singular_triplet(E.T, start=d_old)
        except DegenerateAtomError:
            continue
        a_new = s * v
        D[:, j] = u
        C[users, j] = a_new
        R[users] = E - np.outer(a_new, u)
    return D, C
