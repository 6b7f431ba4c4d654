"""Sparse coding: OMP with a noise-gated stop, and plain ISTA.

Batch routines take patches row-wise (``Y`` is ``(n, p)``) and return codes
row-wise (``(n, m)``).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .linalg import SingularGramError, solve_posdef

log = logging.getLogger(__name__)

STOP_ERROR = "error"
STOP_SPARSITY = "sparsity"
STOP_EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class OmpConfig:
    """Stop when ``||D a - y||^2 <= error_gain * p * sigma**2`` or at ``s_max`` atoms."""

    sigma: float = 0.0
    error_gain: float = 1.15
    s_max: int | None = None

    def __post_init__(self):
        if self.error_gain <= 0:
            raise ValueError("error_gain must be > 0")
        if self.s_max is not None and self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def threshold(self, p: int) -> float:
        return self.error_gain * p * self.sigma ** 2

    def cap(self, p: int) -> int:
        return self.s_max if self.s_max is not None else max(1, p // 4)


@dataclass(frozen=True)
class IstaConfig:
    lam: float
    c: float
    iters: int

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if np.any(np.asarray(self.lam) < 0):
            raise ValueError("lambda must be >= 0")


@dataclass
class SparseCode:
    coeffs: np.ndarray
    support: tuple[int, ...]
    stop_reason: str = ""
    residual_history: tuple[float, ...] = ()


def soft_threshold(v, theta):
    """``sign(v) * max(|v| - theta, 0)``; ``theta`` broadcasts against ``v``."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("threshold must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def l1_objective(D, y, alpha, lam) -> float:
    r = D @ alpha - y
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(alpha)))


def omp(D, y, cfg: OmpConfig) -> SparseCode:
    """Orthogonal matching pursuit for one signal.

    Picks the atom with the largest absolute correlation with the residual
    (lowest index on ties), then refits all selected coefficients by least
    squares. An atom whose addition makes the Gram matrix singular is
    dropped and never offered again.
    """
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p, m = D.shape
    if y.shape != (p,):
        raise ValueError(f"signal must have length {p}")
    thr = cfg.threshold(p)
    cap = cfg.cap(p)
    eligible = np.ones(m, dtype=bool)
    support: list[int] = []
    x = np.zeros(0)
    r = y.copy()
    err = float(r @ r)
    history = [err]
    reason = STOP_ERROR
    while err > thr:
        if len(support) >= cap:
            reason = STOP_SPARSITY
            break
        corr = np.abs(D.T @ r)
        corr[~eligible] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 0.0:
            reason = STOP_EXHAUSTED
            break
        eligible[j] = False
        trial = support + [j]
        Ds = D[:, trial]
        try:
            x = solve_posdef(Ds.T @ Ds, Ds.T @ y)
        except SingularGramError:
            continue
        support = trial
        r = y - Ds @ x
        err = float(r @ r)
        history.append(err)
    coeffs = np.zeros(m)
    if support:
        coeffs[support] = x
    return SparseCode(coeffs, tuple(support), reason, tuple(history))


def _omp_chunk(D, DT, G, Y, thr, cap):
    n, p = Y.shape
    m = D.shape[1]
    B = Y @ D
    R = Y.copy()
    err = np.einsum("ij,ij->i", R, R)
    sel = np.zeros((n, cap), dtype=np.intp)
    X = np.zeros((n, cap))
    size = np.zeros(n, dtype=np.intp)
    active = err > thr
    for k in range(cap):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        corr = np.abs(R[idx] @ D)
        if k:
            np.put_along_axis(corr, sel[idx, :k], -1.0, axis=1)
        j = np.argmax(corr, axis=1)
        ok = corr[np.arange(idx.size), j] > 0.0
        active[idx[~ok]] = False
        idx, j = idx[ok], j[ok]
        if idx.size == 0:
            break
        sel[idx, k] = j
        S = sel[idx, :k + 1]
        Gs = G[S[:, :, None], S[:, None, :]]
        bs = np.take_along_axis(B[idx], S, axis=1)
        L = np.linalg.cholesky(Gs)
        z = np.linalg.solve(L, bs[..., None])
        xs = np.linalg.solve(np.swapaxes(L, 1, 2), z)[..., 0]
        X[idx, :k + 1] = xs
        size[idx] = k + 1
        R[idx] = Y[idx] - np.einsum("nk,nkp->np", xs, DT[S])
        err[idx] = np.einsum("ij,ij->i", R[idx], R[idx])
        active[idx] = err[idx] > thr
    codes = np.zeros((n, m))
    used = np.arange(cap)[None, :] < size[:, None]
    codes[np.nonzero(used)[0], sel[used]] = X[used]
    capped = int(np.sum((size == cap) & (err > thr)))
    return codes, capped


def omp_batch(D, Y, cfg: OmpConfig, chunk: int = 4096, threads: int = 1):
    """OMP for many signals at once.

    Chunks are fixed-size and independent, so the output does not depend on
    ``threads``. A chunk whose batched Cholesky fails falls back to
    :func:`omp` per signal.

    Returns:
        ``(codes, n_capped)`` where ``n_capped`` counts signals that stopped
        on the sparsity cap with the error target unmet.
    """
    D = np.ascontiguousarray(D, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    p, m = D.shape
    if Y.ndim != 2 or Y.shape[1] != p:
        raise ValueError(f"signals must be (n, {p}), got {Y.shape}")
    thr = cfg.threshold(p)
    cap = cfg.cap(p)
    DT = np.ascontiguousarray(D.T)
    G = D.T @ D

    def run(start):
        Yc = Y[start:start + chunk]
        try:
            return _omp_chunk(D, DT, G, Yc, thr, cap)
        except np.linalg.LinAlgError:
            codes = np.zeros((Yc.shape[0], m))
            capped = 0
            for i, y in enumerate(Yc):
                sc = omp(D, y, cfg)
                codes[i] = sc.coeffs
                capped += sc.stop_reason == STOP_SPARSITY
            return codes, capped

    starts = range(0, Y.shape[0], chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return np.zeros((0, m)), 0
    codes = np.concatenate([c for c, _ in parts])
    capped = sum(n for _, n in parts)
    if capped:
        log.info("OMP sparsity cap (%d atoms) hit on %d of %d signals", cap, capped, Y.shape[0])
    return codes, capped


def ista_step(D, Y, A, lam, c):
    """One ISTA iteration, row-wise: ``S_{lam/c}(A - (A D^T - Y) D / c)``."""
    U = A - ((A @ D.T - Y) @ D) / c
    theta = np.asarray(lam, dtype=np.float64) / c
    if theta.ndim == 1:
        theta = theta[:, None]
    return soft_threshold(U, theta)


def ista(D, y, cfg: IstaConfig, alpha0=None) -> np.ndarray:
    """Run exactly ``cfg.iters`` ISTA iterations starting from ``alpha0`` (zero by default).

    ``y`` may be a single signal of length p or an ``(n, p)`` batch, in
    which case ``cfg.lam`` may also be a length-n array.
    """
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if cfg.c <= 0:
        raise ValueError("c must be > 0")
    single = y.ndim == 1
    Y = y[None, :] if single else y
    m = D.shape[1]
    if alpha0 is None:
        A = np.zeros((Y.shape[0], m))
    else:
        A = np.array(alpha0, dtype=np.float64).reshape(Y.shape[0], m)
    for _ in range(cfg.iters):
        A = ista_step(D, Y, A, cfg.lam, cfg.c)
    return A[0] if single else A
