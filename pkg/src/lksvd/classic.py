"""Classic K-SVD denoising: universal dictionary and image-adaptive variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dictionary import ksvd_update, overcomplete_dct, representation_error
from .imageops import aggregate_classic, as_image, extract_patches
from .pursuit import OmpConfig, omp_batch

log = logging.getLogger(__name__)


@dataclass
class ClassicConfig:
    sigma: float
    patch_side: int = 8
    m: int = 256
    error_gain: float = 1.15
    s_max: int | None = None
    mu_gain: float = 30.0
    adapt_rounds: int = 10
    remove_dc: bool = False
    # dictionary-learning rounds use every 4th patch above this many patches
    subsample_above: int = 100_000
    threads: int = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0 for denoising")
        if self.adapt_rounds < 0:
            raise ValueError("adapt_rounds must be >= 0")

    @property
    def p(self) -> int:
        return self.patch_side ** 2

    @property
    def mu(self) -> float:
        return self.mu_gain / self.sigma

    def omp_config(self) -> OmpConfig:
        return OmpConfig(sigma=self.sigma, error_gain=self.error_gain, s_max=self.s_max)


@dataclass
class ClassicStats:
    capped: int = 0
    n_patches: int = 0
    training_patches: int = 0
    round_errors: list = field(default_factory=list)


def _code(D, X, cfg: ClassicConfig, stats: ClassicStats | None):
    codes, capped = omp_batch(D, X, cfg.omp_config(), threads=cfg.threads)
    if stats is not None:
        stats.capped += capped
    return codes


def _split_dc(X, remove_dc):
    if not remove_dc:
        return X, 0.0
    dc = X.mean(axis=1, keepdims=True)
    return X - dc, dc


def denoise_universal(Y, D, cfg: ClassicConfig, stats: ClassicStats | None = None) -> np.ndarray:
    """Denoise with a fixed dictionary: per-patch OMP, then the closed-form image update."""
    Y = as_image(Y)
    D = np.asarray(D, dtype=np.float64)
    if D.shape[0] != cfg.p:
        raise ValueError(f"dictionary has {D.shape[0]} rows, patch size is {cfg.p}")
    ps = extract_patches(Y, cfg.patch_side)
    X, dc = _split_dc(ps.patches, cfg.remove_dc)
    codes = _code(D, X, cfg, stats)
    if stats is not None:
        stats.n_patches = ps.count
    return aggregate_classic(ps, codes @ D.T + dc, Y, cfg.mu)


def learn_dictionary(X, D0, rounds: int, omp_cfg: OmpConfig, threads: int = 1, callback=None):
    """Alternate OMP over all rows of ``X`` and a K-SVD sweep, ``rounds`` times.

    ``callback(round, err_after_coding, err_after_update)`` is called once
    per round with total squared representation errors.
    """
    D = np.array(D0, dtype=np.float64)
    for r in range(rounds):
        codes, _ = omp_batch(D, X, omp_cfg, threads=threads)
        before = representation_error(D, X, codes)
        D, codes = ksvd_update(D, X, codes)
        after = representation_error(D, X, codes)
        log.info("K-SVD round %d: error %.6g -> %.6g", r + 1, before, after)
        if callback is not None:
            callback(r, before, after)
    return D


def denoise_adaptive(Y, cfg: ClassicConfig, stats: ClassicStats | None = None,
                     callback=None):
    """Image-adaptive K-SVD: learn the dictionary on the noisy patches, then denoise.

    Returns:
        ``(denoised, dictionary)``.
    """
    Y = as_image(Y)
    D = overcomplete_dct(cfg.p, cfg.m)
    if cfg.adapt_rounds:
        ps = extract_patches(Y, cfg.patch_side)
        X, _ = _split_dc(ps.patches, cfg.remove_dc)
        if X.shape[0] > cfg.subsample_above:
            X = X[::4]
            log.info("dictionary learning on every 4th patch (%d patches)", X.shape[0])
        if stats is not None:
            stats.training_patches = X.shape[0]

        def record(r, before, after):
            if stats is not None:
                stats.round_errors.append((before, after))
            if callback is not None:
                callback(r, before, after)

        D = learn_dictionary(X, D, cfg.adapt_rounds, cfg.omp_config(), cfg.threads, record)
    return denoise_universal(Y, D, cfg, stats), D
