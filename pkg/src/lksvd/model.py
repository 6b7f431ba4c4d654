"""Learned K-SVD forward pass and model files.

One stage maps an image to an image:

1. extract all stride-1 patches ``y_k``;
2. ``lambda_k = max(W3^T relu(W2^T relu(W1^T y_k)), 0)``;
3. ``T`` ISTA iterations with step ``1/c`` and threshold ``lambda_k / c``
   starting from zero;
4. ``x_k = D a_k``;
5. weighted averaging of the ``x_k`` with the in-patch weight pattern ``w``.

``K`` stages are chained on their own outputs. ``D``, ``c`` and ``w`` are
shared by all stages; each stage has its own lambda network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import overcomplete_dct
from .imageops import PatchSet, as_image, extract_patches, scatter_patches
from .linalg import spectral_norm_sq
from .pursuit import soft_threshold

MAGIC = b"LKSV"
FORMAT_VERSION = 1
W_FLOOR = 1e-6
C_FLOOR = 1e-6


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class DimensionError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_side: int = 8
    m: int = 256
    T: int = 7
    K: int = 3
    sigma: float = 25.0

    def __post_init__(self):
        if self.patch_side < 1:
            raise ValueError("patch_side must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.K < 0:
            raise ValueError("K must be >= 0 (K = 0 stores a dictionary only)")
        if self.m < self.p:
            raise ValueError(f"m ({self.m}) must be >= p ({self.p})")

    @property
    def p(self) -> int:
        return self.patch_side ** 2


@dataclass
class StageMlp:
    W1: np.ndarray  # (p, 2p)
    W2: np.ndarray  # (2p, p)
    W3: np.ndarray  # (p, 1)

    def copy(self) -> "StageMlp":
        return StageMlp(self.W1.copy(), self.W2.copy(), self.W3.copy())


@dataclass
class LksvdParams:
    D: np.ndarray
    c: float
    w: np.ndarray
    mlps: list = field(default_factory=list)
    T: int = 7  # unrolled ISTA iterations; structural, not learned

    def copy(self) -> "LksvdParams":
        return LksvdParams(self.D.copy(), float(self.c), self.w.copy(),
                           [mlp.copy() for mlp in self.mlps], self.T)

    def blocks(self):
        """``(name, array)`` pairs for every learnable block, in file order."""
        out = [("D", self.D), ("c", np.array([self.c])), ("w", self.w)]
        for k, mlp in enumerate(self.mlps):
            out += [(f"W1[{k}]", mlp.W1), (f"W2[{k}]", mlp.W2), (f"W3[{k}]", mlp.W3)]
        return out

    def n_scalars(self) -> int:
        return sum(a.size for _, a in self.blocks())


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(rng: np.random.Generator, p: int) -> StageMlp:
    return StageMlp(kaiming_uniform(rng, p, (p, 2 * p)),
                    kaiming_uniform(rng, 2 * p, (2 * p, p)),
                    kaiming_uniform(rng, p, (p, 1)))


def init_params(cfg: ModelConfig, seed: int) -> LksvdParams:
    """DCT dictionary, ``c`` = its squared spectral norm, unit weights, Kaiming-uniform MLPs."""
    D = overcomplete_dct(cfg.p, cfg.m)
    rng = np.random.default_rng(seed)
    mlps = [init_mlp(rng, cfg.p) for _ in range(cfg.K)]
    return LksvdParams(D, float(spectral_norm_sq(D)), np.ones(cfg.p), mlps, cfg.T)


def param_count(cfg: ModelConfig) -> int:
    p, m = cfg.p, cfg.m
    return cfg.K * (4 * p * p + p) + p * m + p + 1


def published_param_count(cfg: ModelConfig) -> float:
    """Count from the published single-stage formula ``p(4p + m + 3/2) + 1``."""
    p = cfg.p
    return p * (4 * p + cfg.m + 1.5) + 1


def param_count_note(cfg: ModelConfig) -> str:
    ours = param_count(cfg)
    p = cfg.p
    lines = [f"learnable scalars: {ours}"]
    if cfg.K == 1:
        ref = published_param_count(cfg)
        lines.append(f"published formula p(4p+m+3/2)+1: {ref:g} (difference {ours - ref:+g} = p/2)")
    lines.append(f"lambda network per stage: p->2p->p->1 = {4 * p * p + p} weights; "
                 f"the published layer list ends in a p/2 x 1 matrix, which cannot follow a "
                 f"width-p layer, so the last layer here is p x 1 (+p/2 weights per stage)")
    return "\n".join(lines)


def mlp_forward(mlp: StageMlp, Y: np.ndarray):
    """Batched lambda network. Returns ``(lam, cache)`` with ``lam`` of shape (n,)."""
    Z1 = Y @ mlp.W1
    H1 = np.maximum(Z1, 0.0)
    Z2 = H1 @ mlp.W2
    H2 = np.maximum(Z2, 0.0)
    raw = (H2 @ mlp.W3)[:, 0]
    return np.maximum(raw, 0.0), (Z1, H1, Z2, H2, raw)


def mlp_lambda(mlp: StageMlp, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    lam, _ = mlp_forward(mlp, y[None, :])
    return float(lam[0])


def effective_w(w: np.ndarray) -> np.ndarray:
    return np.maximum(w, W_FLOOR)


def ista_trajectory(D, Yp, lam, c, T):
    """All iterates ``A_0 = 0, ..., A_T`` of row-wise ISTA."""
    theta = (lam / c)[:, None]
    A = np.zeros((Yp.shape[0], D.shape[1]))
    traj = [A]
    for _ in range(T):
        U = A - ((A @ D.T - Yp) @ D) / c
        A = soft_threshold(U, theta)
        traj.append(A)
    return traj


def sparse_code(D, Yp, lam, c, T):
    return ista_trajectory(D, Yp, lam, c, T)[-1]


@dataclass
class StageCache:
    ps: PatchSet
    lam: np.ndarray
    mlp_cache: tuple
    A_T: np.ndarray
    Xp: np.ndarray
    num: np.ndarray
    den: np.ndarray
    out: np.ndarray


def forward_stage(params: LksvdParams, stage_idx: int, Y, cache: bool = False):
    """Run one denoising stage on image ``Y``."""
    if not 0 <= stage_idx < len(params.mlps):
        raise IndexError(f"stage {stage_idx} out of range for {len(params.mlps)} stages")
    if params.c <= 0:
        raise ValueError("c must be > 0")
    if params.T < 1:
        raise ValueError("T must be >= 1")
    Y = as_image(Y)
    p = params.D.shape[0]
    side = int(round(np.sqrt(p)))
    ps = extract_patches(Y, side)
    lam, mlp_cache = mlp_forward(params.mlps[stage_idx], ps.patches)
    A_T = sparse_code(params.D, ps.patches, lam, params.c, params.T)
    Xp = A_T @ params.D.T
    w = effective_w(params.w)
    num = scatter_patches(Xp * w, ps.patch_shape, ps.source_shape)
    den = scatter_patches(np.broadcast_to(w, Xp.shape), ps.patch_shape, ps.source_shape)
    out = num / den
    if cache:
        return out, StageCache(ps, lam, mlp_cache, A_T, Xp, num, den, out)
    return out


def forward(params: LksvdParams, Y) -> np.ndarray:
    X = as_image(Y)
    for k in range(len(params.mlps)):
        X = forward_stage(params, k, X)
    return X


# -- model files -----------------------------------------------------------

_HEADER = struct.Struct("<4sHIIIId")


def _ordered_arrays(params: LksvdParams):
    arrays = [params.D, np.array([params.c]), params.w]
    for mlp in params.mlps:
        arrays += [mlp.W1, mlp.W2, mlp.W3]
    return arrays


def encode_model(params: LksvdParams, cfg: ModelConfig) -> bytes:
    p, m = cfg.p, cfg.m
    if (params.D.shape != (p, m) or params.w.shape != (p,) or len(params.mlps) != cfg.K
            or params.T != cfg.T):
        raise DimensionError("params do not match the model config")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, cfg.patch_side, cfg.m, cfg.T, cfg.K, float(cfg.sigma))
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _ordered_arrays(params))
    return head + body


def decode_model(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not an LKSV model file")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"truncated header: {len(buf)} of {_HEADER.size} bytes")
    magic, version, side, m, T, K, sigma = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        cfg = ModelConfig(patch_side=side, m=m, T=T, K=K, sigma=sigma)
    except ValueError as exc:
        raise DimensionError(f"inconsistent model dimensions: {exc}") from exc
    p = cfg.p
    shapes = [(p, m), (1,), (p,)] + [(p, 2 * p), (2 * p, p), (p, 1)] * K
    need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(buf) < need:
        raise TruncatedFileError(f"truncated payload: expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise DimensionError(f"{len(buf) - need} trailing bytes after model payload")
    arrays = []
    off = _HEADER.size
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(s))
        off += 8 * n
    D, c, w = arrays[0], float(arrays[1][0]), arrays[2]
    mlps = [StageMlp(*arrays[3 + 3 * k:6 + 3 * k]) for k in range(K)]
    return LksvdParams(D, c, w, mlps, T), cfg


def save_model(params: LksvdParams, cfg: ModelConfig, path) -> None:
    Path(path).write_bytes(encode_model(params, cfg))


def load_model(path):
    return decode_model(Path(path).read_bytes())
