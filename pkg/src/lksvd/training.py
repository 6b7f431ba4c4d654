"""Reverse-mode gradients of the learned K-SVD network and the SGD loop.

The graph is static (fixed ``T`` and ``K``), so the backward pass is written
out by hand, one adjoint per forward operation. Local derivative
conventions at kinks: ``relu'(0) = 0``; the soft threshold passes gradient
only where ``|u| > theta``; the lambda clamp passes gradient only where the
raw output is positive; ``w`` passes gradient only above its floor.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import normalize_atoms
from .imageops import add_noise, as_image, extract_patches, load_image, psnr, scatter_patches
from .model import (C_FLOOR, W_FLOOR, LksvdParams, ModelConfig, StageMlp, effective_w,
                    forward, forward_stage, init_params, ista_trajectory, kaiming_uniform,
                    load_model, save_model)

log = logging.getLogger(__name__)


class GradientError(FloatingPointError):
    pass


@dataclass
class Gradients:
    dD: np.ndarray
    dc: float
    dw: np.ndarray
    dW1: list
    dW2: list
    dW3: list

    def blocks(self):
        out = [("D", self.dD), ("c", np.array([self.dc])), ("w", self.dw)]
        for k in range(len(self.dW1)):
            out += [(f"W1[{k}]", self.dW1[k]), (f"W2[{k}]", self.dW2[k]), (f"W3[{k}]", self.dW3[k])]
        return out

    @classmethod
    def zeros_like(cls, params: LksvdParams) -> "Gradients":
        return cls(np.zeros_like(params.D), 0.0, np.zeros_like(params.w),
                   [np.zeros_like(m.W1) for m in params.mlps],
                   [np.zeros_like(m.W2) for m in params.mlps],
                   [np.zeros_like(m.W3) for m in params.mlps])


def loss_mse(Xhat, X) -> float:
    """Sum of squared pixel differences."""
    Xhat, X = as_image(Xhat), as_image(X)
    if Xhat.shape != X.shape:
        raise ValueError(f"image shapes differ: {Xhat.shape} vs {X.shape}")
    d = Xhat - X
    return float(np.sum(d * d))


def random_params(cfg: ModelConfig, rng: np.random.Generator, c_margin: float = 1.0) -> LksvdParams:
    """Random unit-norm dictionary (any ``m``), matching ``c``, random positive ``w``."""
    p, m = cfg.p, cfg.m
    D = normalize_atoms(rng.standard_normal((p, m)))
    c = float(np.linalg.norm(D, 2) ** 2) * c_margin
    w = rng.uniform(0.5, 1.5, size=p)
    mlps = [StageMlp(kaiming_uniform(rng, p, (p, 2 * p)),
                     kaiming_uniform(rng, 2 * p, (2 * p, p)),
                     kaiming_uniform(rng, p, (p, 1))) for _ in range(cfg.K)]
    return LksvdParams(D, c, w, mlps, cfg.T)


def _stage_backward(params: LksvdParams, k: int, cache, g_out: np.ndarray, grads: Gradients):
    """Accumulate stage ``k`` parameter gradients; return the gradient w.r.t. the stage input."""
    D, c, T = params.D, params.c, params.T
    ps = cache.ps
    Yp = ps.patches
    w = effective_w(params.w)

    # weighted aggregation: out = num / den
    g_num = g_out / cache.den
    g_den = -g_out * cache.out / cache.den
    e_num = extract_patches(g_num, ps.patch_shape).patches
    e_den = extract_patches(g_den, ps.patch_shape).patches
    dXp = e_num * w
    dw_eff = np.sum(cache.Xp * e_num, axis=0) + np.sum(e_den, axis=0)
    grads.dw += dw_eff * (params.w > W_FLOOR)

    # reconstruction: Xp = A_T D^T
    traj = ista_trajectory(D, Yp, cache.lam, c, T)
    dA = dXp @ D
    grads.dD += dXp.T @ traj[-1]

    lam = cache.lam
    theta = (lam / c)[:, None]
    dtheta = np.zeros_like(lam)
    dYp = np.zeros_like(Yp)
    dc = 0.0
    for t in range(T - 1, -1, -1):
        A = traj[t]
        R = A @ D.T - Yp
        Q = R @ D
        U = A - Q / c
        mask = np.abs(U) > theta
        dU = dA * mask
        dtheta -= np.sum(dU * np.sign(U), axis=1)
        dc += float(np.sum(dU * Q)) / c ** 2
        dQ = -dU / c
        dR = dQ @ D.T
        grads.dD += R.T @ dQ + dR.T @ A
        dA = dU + dR @ D
        dYp -= dR

    # theta = lam / c
    dlam = dtheta / c
    dc -= float(np.sum(dtheta * lam)) / c ** 2
    grads.dc += dc

    # lambda network
    mlp = params.mlps[k]
    Z1, H1, Z2, H2, raw = cache.mlp_cache
    draw = (dlam * (raw > 0))[:, None]
    grads.dW3[k] += H2.T @ draw
    dZ2 = (draw @ mlp.W3.T) * (Z2 > 0)
    grads.dW2[k] += H1.T @ dZ2
    dZ1 = (dZ2 @ mlp.W2.T) * (Z1 > 0)
    grads.dW1[k] += Yp.T @ dZ1
    dYp += dZ1 @ mlp.W1.T

    return scatter_patches(dYp, ps.patch_shape, ps.source_shape)


def backward(params: LksvdParams, Y, X):
    """Loss and exact gradients of ``loss_mse(forward(params, Y), X)``.

    Raises:
        GradientError: if any gradient entry is not finite.
    """
    Y, X = as_image(Y), as_image(X)
    caches = []
    img = Y
    for k in range(len(params.mlps)):
        img, cache = forward_stage(params, k, img, cache=True)
        caches.append(cache)
    diff = img - X
    loss = float(np.sum(diff * diff))
    if not math.isfinite(loss):
        raise GradientError(f"non-finite gradient: forward output is not finite "
                            f"(loss={loss!r}, c={params.c!r})")
    grads = Gradients.zeros_like(params)
    g = 2.0 * diff
    for k in range(len(params.mlps) - 1, -1, -1):
        g = _stage_backward(params, k, caches[k], g, grads)
    for name, arr in grads.blocks():
        if not np.all(np.isfinite(arr)):
            bad = np.flatnonzero(~np.isfinite(np.ravel(arr)))
            raise GradientError(f"non-finite gradient in block {name} at flat indices {bad[:5].tolist()} "
                                f"(loss={loss!r}, c={params.c!r})")
    return loss, grads


def sgd_step(params: LksvdParams, grads: Gradients, lr: float) -> LksvdParams:
    """Plain SGD, then clamp ``c`` and ``w`` to their floors. Returns new params."""
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    out = params.copy()
    out.D = params.D - lr * grads.dD
    out.c = max(params.c - lr * grads.dc, C_FLOOR)
    out.w = np.maximum(params.w - lr * grads.dw, W_FLOOR)
    for k, mlp in enumerate(out.mlps):
        mlp.W1 = params.mlps[k].W1 - lr * grads.dW1[k]
        mlp.W2 = params.mlps[k].W2 - lr * grads.dW2[k]
        mlp.W3 = params.mlps[k].W3 - lr * grads.dW3[k]
    return out


# -- finite differences ----------------------------------------------------

def _flat_views(params: LksvdParams):
    """Writable flat views of every learnable block (``c`` handled separately)."""
    views = [("D", params.D.reshape(-1)), ("c", None), ("w", params.w.reshape(-1))]
    for k, mlp in enumerate(params.mlps):
        views += [(f"W1[{k}]", mlp.W1.reshape(-1)), (f"W2[{k}]", mlp.W2.reshape(-1)),
                  (f"W3[{k}]", mlp.W3.reshape(-1))]
    return views


def all_indices(params: LksvdParams):
    out = []
    for name, arr in params.blocks():
        out += [(name, i) for i in range(arr.size)]
    return out


def numeric_gradient(params: LksvdParams, Y, X, name: str, i: int, step: float) -> float:
    def loss_at(delta):
        q = params.copy()
        if name == "c":
            q.c = q.c + delta
        else:
            dict(_flat_views(q))[name][i] += delta
        return loss_mse(forward(q, Y), X)
    return (loss_at(step) - loss_at(-step)) / (2.0 * step)


@dataclass
class FdReport:
    max_rel_error: float
    per_block: dict = field(default_factory=dict)
    worst: tuple = ()


def finite_diff_check(params: LksvdParams, Y, X, step: float = 1e-5, indices=None,
                      atol: float = 0.0, grads: Gradients | None = None) -> FdReport:
    """Compare backward's gradient with central differences.

    Relative error per scalar is ``|a - n| / (|a| + |n| + 1e-12)``; entries
    whose absolute difference is at most ``atol`` count as zero error.
    ``grads`` may be supplied to audit a given gradient instead of
    recomputing it.
    """
    if grads is None:
        _, grads = backward(params, Y, X)
    analytic = dict((n, np.ravel(a)) for n, a in grads.blocks())
    if indices is None:
        indices = all_indices(params)
    report = FdReport(0.0)
    for name, i in indices:
        a = float(analytic[name][i])
        n = numeric_gradient(params, Y, X, name, i, step)
        diff = abs(a - n)
        rel = 0.0 if diff <= atol else diff / (abs(a) + abs(n) + 1e-12)
        block = name.split("[")[0] if name.startswith(("D", "c", "w")) else name
        report.per_block[block] = max(report.per_block.get(block, 0.0), rel)
        if rel >= report.max_rel_error:
            report.max_rel_error = rel
            report.worst = (name, i, a, n)
    return report


def kink_margin(params: LksvdParams, Y) -> float:
    """Smallest distance of any ReLU, clamp or soft-threshold input from its kink."""
    margin = math.inf
    img = as_image(Y)
    for k in range(len(params.mlps)):
        img, cache = forward_stage(params, k, img, cache=True)
        # an all-zero patch sits on every kink but maps to zero on both sides
        live = np.any(cache.ps.patches != 0, axis=1)
        if not np.any(live):
            continue
        Z1, _, Z2, _, raw = (a[live] for a in cache.mlp_cache)
        margin = min(margin, np.abs(Z1).min(), np.abs(Z2).min(), np.abs(raw).min())
        lam = cache.lam[live]
        Yp = cache.ps.patches[live]
        theta = (lam / params.c)[:, None]
        traj = ista_trajectory(params.D, Yp, lam, params.c, params.T)
        for A in traj[:-1]:
            U = A - ((A @ params.D.T - Yp) @ params.D) / params.c
            margin = min(margin, np.abs(np.abs(U) - theta).min())
    return float(margin)


def gradcheck_sample(cfg: ModelConfig, rng: np.random.Generator, min_margin: float = 1e-6,
                     max_tries: int = 400, size: int = 8):
    """Random params and a ``size x size`` pair ``(Y, X)`` suited to a gradient check.

    Samples are redrawn until every kink is at least ``min_margin`` away
    and every parameter block has a nonzero gradient somewhere (a stage
    whose lambda is clamped to zero on all patches would pass vacuously).
    """
    for _ in range(max_tries):
        params = random_params(cfg, rng)
        X = rng.uniform(0.0, 1.0, size=(size, size))
        Y = X + 0.1 * rng.standard_normal((size, size))
        if kink_margin(params, Y) < min_margin:
            continue
        _, grads = backward(params, Y, X)
        if all(np.any(g != 0) for _, g in grads.blocks()):
            return params, Y, X
    raise GradientError(f"no usable gradient-check sample for {cfg} after {max_tries} tries")


# -- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    learning_rate: float = 1e-4
    crop_size: int = 128
    sigma: float = 25.0
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    # images are divided by this before the loss; the network is positively
    # homogeneous, so only the gradient scale changes
    intensity_scale: float = 255.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def list_images(dataset_dir) -> list:
    files = sorted(Path(dataset_dir).glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no .pgm images in {dataset_dir}")
    return files


def step_seed(seed: int, step: int, salt: int = 0) -> int:
    """Per-step 64-bit seed derived from ``(seed, step, salt)``."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, step, salt])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_crop(images: list, size: int, seed: int, step: int):
    rng = np.random.default_rng(step_seed(seed, step, 1))
    img = images[int(rng.integers(len(images)))]
    H, W = img.shape
    r = int(rng.integers(H - size + 1))
    c = int(rng.integers(W - size + 1))
    return img[r:r + size, c:c + size]


def validation_pair(images: list, size: int, sigma: float, seed: int):
    img = images[0]
    H, W = img.shape
    r, c = (H - size) // 2, (W - size) // 2
    X = img[r:r + size, c:c + size]
    return X, add_noise(X, sigma, step_seed(seed, 0, 3))


HISTORY_FIELDS = ("step", "loss", "val_psnr")


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_FIELDS)
        for step, loss, val in history:
            wr.writerow([step, repr(loss), "" if val is None else repr(val)])


def read_history(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            val = float(row["val_psnr"]) if row["val_psnr"] else None
            rows.append((int(row["step"]), float(row["loss"]), val))
    return rows


def _load_dataset(dataset_dir, crop: int):
    images = [load_image(f) for f in list_images(dataset_dir)]
    for f, img in zip(list_images(dataset_dir), images):
        if min(img.shape) < crop:
            raise ValueError(f"{f} is smaller than the {crop}x{crop} crop")
    return images


def train(dataset_dir, cfg: ModelConfig, tcfg: TrainConfig, params: LksvdParams | None = None,
          start_step: int = 0, history: list | None = None, callback=None):
    """SGD on random noisy crops, one crop per step.

    Step ``s`` draws its image, crop offset and noise from seeds derived
    from ``(tcfg.seed, s)`` alone, so a run resumed from a checkpoint at
    step ``s`` continues exactly like an uninterrupted one.

    Returns:
        ``(params, history)`` with history rows ``(step, loss, val_psnr)``.
    """
    if tcfg.crop_size < cfg.patch_side:
        raise ValueError("crop_size must be >= patch_side")
    images = _load_dataset(dataset_dir, tcfg.crop_size)
    if params is None:
        params = init_params(cfg, tcfg.seed)
    history = list(history or [])
    val_X, val_Y = validation_pair(images, tcfg.crop_size, tcfg.sigma, tcfg.seed)
    for step in range(start_step, tcfg.steps):
        X = sample_crop(images, tcfg.crop_size, tcfg.seed, step)
        Y = add_noise(X, tcfg.sigma, step_seed(tcfg.seed, step, 2))
        loss, grads = backward(params, Y / tcfg.intensity_scale, X / tcfg.intensity_scale)
        if not math.isfinite(loss):
            raise GradientError(f"non-finite loss at step {step}")
        params = sgd_step(params, grads, tcfg.learning_rate)
        val = None
        if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
            val = psnr(forward(params, val_Y), val_X)
            log.info("step %d loss %.6g val_psnr %.3f", step + 1, loss, val)
        history.append((step + 1, loss, val))
        if tcfg.checkpoint_every and tcfg.checkpoint_path and (step + 1) % tcfg.checkpoint_every == 0:
            checkpoint(params, cfg, history, tcfg.checkpoint_path)
        if callback is not None:
            callback(step + 1, loss, params)
    return params, history


def checkpoint(params, cfg, history, path) -> None:
    save_model(params, cfg, path)
    write_history(history, history_path(path))


def history_path(model_path) -> Path:
    return Path(str(model_path) + ".history.csv")


def resume(path):
    """Load a checkpoint and its history; returns ``(params, cfg, history, next_step)``."""
    params, cfg = load_model(path)
    hist = read_history(history_path(path))
    return params, cfg, hist, (hist[-1][0] if hist else 0)


def dataset_fingerprint(dataset_dir) -> str:
    crc = 0
    for f in list_images(dataset_dir):
        crc = zlib.crc32(f.name.encode(), crc)
        crc = zlib.crc32(f.read_bytes(), crc)
    return f"{crc:08x}"
