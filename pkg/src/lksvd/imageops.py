"""Grayscale images, overlapping patches, noise and quality metrics.

Images are plain 2-D float64 numpy arrays on the [0, 255] scale. Patches are
extracted with stride 1 and no padding; patch ``k`` has its top-left corner
at ``divmod(k, n_cols)`` and is flattened row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 255.0


class ImageFormatError(ValueError):
    pass


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains NaN or Inf")
    return img


def _patch_shape(patch_side) -> tuple[int, int]:
    if np.ndim(patch_side) == 0:
        return int(patch_side), int(patch_side)
    ph, pw = patch_side
    return int(ph), int(pw)


@dataclass(frozen=True)
class PatchSet:
    """All stride-1 patches of an image, one flattened patch per row."""

    patch_shape: tuple[int, int]
    source_shape: tuple[int, int]
    patches: np.ndarray

    @property
    def grid(self) -> tuple[int, int]:
        return (self.source_shape[0] - self.patch_shape[0] + 1,
                self.source_shape[1] - self.patch_shape[1] + 1)

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_side(self) -> int:
        return self.patch_shape[0]


def extract_patches(img, patch_side) -> PatchSet:
    """Extract every fully overlapping patch. ``patch_side`` may be an int or (h, w)."""
    img = as_image(img)
    ph, pw = _patch_shape(patch_side)
    if ph < 1 or pw < 1 or ph > img.shape[0] or pw > img.shape[1]:
        raise ValueError(f"patch {ph}x{pw} does not fit in image {img.shape}")
    win = sliding_window_view(img, (ph, pw))
    patches = np.ascontiguousarray(win.reshape(-1, ph * pw))
    return PatchSet((ph, pw), img.shape, patches)


def scatter_patches(values: np.ndarray, patch_shape, source_shape) -> np.ndarray:
    """Sum ``R_k^T values_k`` over all patch positions (no normalization).

    Accumulation runs over in-patch offsets in a fixed order, so the result
    is deterministic.
    """
    ph, pw = patch_shape
    H, W = source_shape
    nr, nc = H - ph + 1, W - pw + 1
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (nr * nc, ph * pw):
        raise ValueError(f"expected patch matrix of shape {(nr * nc, ph * pw)}, got {values.shape}")
    v = values.reshape(nr, nc, ph, pw)
    out = np.zeros((H, W))
    for di in range(ph):
        for dj in range(pw):
            out[di:di + nr, dj:dj + nc] += v[:, :, di, dj]
    return out


def overlap_counts(patch_shape, source_shape) -> np.ndarray:
    ph, pw = patch_shape
    H, W = source_shape
    nr, nc = H - ph + 1, W - pw + 1
    rows = np.minimum.reduce([np.arange(H) + 1, np.full(H, ph), np.full(H, nr), H - np.arange(H)])
    cols = np.minimum.reduce([np.arange(W) + 1, np.full(W, pw), np.full(W, nc), W - np.arange(W)])
    return np.outer(rows, cols).astype(np.float64)


def _check_estimates(ps: PatchSet, estimates) -> np.ndarray:
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.shape != ps.patches.shape:
        raise ValueError(f"estimates shape {estimates.shape} != patches shape {ps.patches.shape}")
    return estimates


def aggregate_classic(ps: PatchSet, estimates, noisy, mu: float) -> np.ndarray:
    """Closed-form image update: ``(mu*Y + sum_k R_k^T x_k) / (mu + overlap)``."""
    estimates = _check_estimates(ps, estimates)
    noisy = as_image(noisy)
    if noisy.shape != ps.source_shape:
        raise ValueError("noisy image does not match the patch set source")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    num = mu * noisy + scatter_patches(estimates, ps.patch_shape, ps.source_shape)
    return num / (mu + overlap_counts(ps.patch_shape, ps.source_shape))


def aggregate_weighted(ps: PatchSet, estimates, w) -> np.ndarray:
    """Weighted patch averaging with a positive in-patch weight pattern ``w``."""
    estimates = _check_estimates(ps, estimates)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != estimates.shape[1]:
        raise ValueError("weight pattern length must equal the patch size")
    if np.any(w <= 0):
        raise ValueError("aggregation weights must be strictly positive")
    num = scatter_patches(estimates * w, ps.patch_shape, ps.source_shape)
    den = scatter_patches(np.broadcast_to(w, estimates.shape), ps.patch_shape, ps.source_shape)
    return num / den


# -- noise -----------------------------------------------------------------

def gaussian_samples(n: int, seed: int) -> np.ndarray:
    """Deterministic N(0, 1) samples.

    Raw 64-bit words come from Philox4x64-10 keyed with ``seed`` and counter
    starting at zero. Each word becomes a uniform in (0, 1) as
    ``((x >> 11) + 0.5) * 2**-53``; consecutive uniform pairs go through
    Box-Muller (cosine branch first, then sine).
    """
    bitgen = np.random.Philox(key=int(seed) % (1 << 64))
    n_pairs = (n + 1) // 2
    raw = bitgen.random_raw(2 * n_pairs).astype(np.uint64)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * n_pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]


def add_noise(img, sigma: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise of std ``sigma``; no clipping."""
    img = as_image(img)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    return img + sigma * gaussian_samples(img.size, seed).reshape(img.shape)


# -- metrics ---------------------------------------------------------------

def _same_shape(x, y):
    x, y = as_image(x), as_image(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """PSNR in dB for peak 255; ``inf`` for identical images."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / err)


SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gaussian_window_1d(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.shape[0]
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(x, y) -> float:
    """Mean SSIM over all 11x11 Gaussian windows fully inside the image."""
    x, y = _same_shape(x, y)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    g = gaussian_window_1d()
    C1 = (SSIM_K1 * PEAK) ** 2
    C2 = (SSIM_K2 * PEAK) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x ** 2
    syy = _filter_valid(y * y, g) - mu_y ** 2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


# -- PGM I/O ---------------------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"truncated PGM header at byte {start}")
    return buf[start:pos], pos


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf.startswith(b"\x89PNG"):
        raise ImageFormatError("unsupported format: PNG (only binary PGM/P5 is read)")
    if not buf.startswith(b"P5"):
        raise ImageFormatError("unsupported format: missing P5 magic at byte 0")
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed PGM header field {tok!r} at byte {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (need 255)")
    if width < 1 or height < 1:
        raise ImageFormatError("PGM dimensions must be positive")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height
    have = len(buf) - pos
    if have < need:
        raise ImageFormatError(f"truncated PGM payload: expected {need} bytes at byte {pos}, found {have}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width).astype(np.float64)


def encode_pgm(img) -> bytes:
    img = as_image(img)
    # clamp, then round half up
    q = np.floor(np.clip(img, 0.0, 255.0) + 0.5).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + q.tobytes()


def load_image(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def save_image(img, path) -> None:
    Path(path).write_bytes(encode_pgm(img))


def quantize(img) -> np.ndarray:
    """The values ``save_image`` would store, as float64."""
    return np.floor(np.clip(as_image(img), 0.0, 255.0) + 0.5)
