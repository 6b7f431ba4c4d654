"""Command-line interface: ``lksvd <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 gradient check or
acceptance failure.

Every command accepts ``--config FILE`` with ``key=value`` lines naming
flags by their long name (dashes or underscores). Flags given on the
command line win. Commands that write outputs also write a manifest, a
flat ``key=value`` file that is itself a valid config file, so
``lksvd replay MANIFEST`` re-runs the command with identical settings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import secrets
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .classic import ClassicConfig, ClassicStats, denoise_adaptive, denoise_universal, learn_dictionary
from .dictionary import mutual_coherence, overcomplete_dct
from .imageops import (ImageFormatError, add_noise, extract_patches, load_image, psnr, save_image,
                       ssim)
from .linalg import spectral_norm_sq
from .model import (LksvdParams, ModelConfig, ModelFormatError, forward, init_params, load_model,
                    param_count_note, save_model, sparse_code, mlp_forward)
from .pursuit import OmpConfig, omp_batch
from .training import (GradientError, TrainConfig, backward, dataset_fingerprint, finite_diff_check,
                       gradcheck_sample, history_path, list_images, resume, train,
                       write_history)

log = logging.getLogger("lksvd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAIL = 0, 1, 2, 3

GRADCHECK_CONFIGS = ((4, 8, 2, 1), (4, 8, 3, 2), (16, 32, 2, 1))
GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5
# samples closer than this to a kink are redrawn; 10x the FD step keeps
# every central difference on one side of each kink
KINK_MIN = 10 * GRADCHECK_STEP

# arguments that steer the CLI itself and never enter a manifest
_META_ARGS = {"config", "manifest", "verbose", "handler", "leaf", "command", "dict_command",
              "model_command"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config files and manifests --------------------------------------------

def read_kv(path) -> dict:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def apply_config(parser: argparse.ArgumentParser, path) -> None:
    """Install the values of a config file as ``parser`` defaults."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help",)}
    for a in list(actions.values()):
        for opt in a.option_strings:
            actions.setdefault(opt.lstrip("-").replace("-", "_"), a)
    defaults = {}
    for key, text in read_kv(path).items():
        if key.startswith(("metric.", "timing.", "noisy.", "dataset.")) or key in (
                "command", "code_version"):
            continue
        dest = key[4:] if key.startswith("arg.") else key
        dest = dest.replace("-", "_")
        action = actions.get(dest)
        if action is None or action.dest in _META_ARGS:
            raise UsageError(f"{path}: unknown setting {key!r}")
        dest = action.dest
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = _parse_bool(text)
        elif action.type is not None:
            try:
                defaults[dest] = action.type(text)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {text!r}") from exc
        else:
            defaults[dest] = text
    parser.set_defaults(**defaults)


def write_manifest(path, command: str, args, metrics=None, timings=None, extra=None) -> None:
    lines = [f"command={command}"]
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in _META_ARGS or value is None:
            continue
        lines.append(f"arg.{key}={_fmt(value)}")
    lines.append(f"seed={_fmt(args.seed)}")
    lines.append(f"code_version={__version__}")
    for prefix, block in (("", extra), ("metric.", metrics), ("timing.", timings)):
        for key, value in (block or {}).items():
            lines.append(f"{prefix}{key}={_fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _manifest_for(args, out_path) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if out_path:
        return Path(str(out_path) + ".manifest")
    return None


def _resolve_seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(32)
        log.info("generated seed %d", args.seed)
    return args.seed


def _threads(args) -> int:
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args.threads


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc
    if not vals:
        raise UsageError("empty list")
    return vals


def _int_list(text: str) -> list[int]:
    return [int(v) for v in _float_list(text)]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _sibling(path, suffix) -> Path:
    return Path(str(path) + suffix)


def _save_dictionary(D, path, sigma: float = 0.0) -> None:
    p, m = D.shape
    cfg = ModelConfig(patch_side=int(round(np.sqrt(p))), m=m, T=1, K=0, sigma=sigma)
    params = LksvdParams(D, float(spectral_norm_sq(D)), np.ones(p), [], 1)
    save_model(params, cfg, path)


def _load_dictionary(path) -> np.ndarray:
    params, _ = load_model(path)
    return params.D


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


# -- dict ------------------------------------------------------------------

def cmd_dict_build(args) -> int:
    _require(args, "out")
    _resolve_seed(args)
    try:
        D = overcomplete_dct(args.p, args.m, remove_mean=not args.keep_mean)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _save_dictionary(D, args.out)
    print(f"wrote {args.m} atoms of {args.p} pixels to {args.out}")
    write_manifest(_manifest_for(args, args.out), "dict build", args,
                   metrics={"coherence": mutual_coherence(D)})
    return EXIT_OK


def _sample_training_patches(files, p: int, n: int, seed: int, remove_dc: bool):
    side = int(round(np.sqrt(p)))
    blocks = [extract_patches(load_image(f), side).patches for f in files]
    X = np.concatenate(blocks)
    if n and X.shape[0] > n:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(X.shape[0], size=n, replace=False))]
    if remove_dc:
        X = X - X.mean(axis=1, keepdims=True)
    return X


def cmd_dict_train(args) -> int:
    _require(args, "images", "out")
    seed = _resolve_seed(args)
    threads = _threads(args)
    if args.rounds < 1:
        raise UsageError("--rounds must be >= 1")
    try:
        D0 = overcomplete_dct(args.p, args.m)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    files = list_images(args.images)
    X = _sample_training_patches(files, args.p, args.patches, seed, not args.keep_dc)
    omp_cfg = OmpConfig(sigma=args.sigma, s_max=args.sparsity)
    rows = []

    def report(r, before, after):
        rows.append((r + 1, repr(before), repr(after)))
        print(f"round {r + 1}: representation error {before:.6g} after coding, "
              f"{after:.6g} after update")

    t0 = time.perf_counter()
    D = learn_dictionary(X, D0, args.rounds, omp_cfg, threads, report)
    elapsed = time.perf_counter() - t0
    _save_dictionary(D, args.out, args.sigma)
    _write_csv(_sibling(args.out, ".rounds.csv"), ("round", "error_after_coding", "error_after_update"),
               rows)
    from .report import dictionary_atoms

    dictionary_atoms(D, _sibling(args.out, ".atoms.png"), title=f"trained dictionary, {args.rounds} rounds")
    write_manifest(_manifest_for(args, args.out), "dict train", args,
                   metrics={"training_patches": X.shape[0], "final_error": float(rows[-1][2])},
                   timings={"train_s": round(elapsed, 3)},
                   extra={"dataset.fingerprint": dataset_fingerprint(args.images)})
    return EXIT_OK


def cmd_dict_inspect(args) -> int:
    _require(args, "file")
    params, cfg = load_model(args.file)
    D = params.D
    dev = float(np.max(np.abs(np.linalg.norm(D, axis=0) - 1.0)))
    status = "OK" if dev <= 1e-9 else f"FAIL (max deviation {dev:.3g})"
    print(f"{D.shape[1]} atoms, unit-norm: {status}")
    print(f"patch: {cfg.patch_side}x{cfg.patch_side} (p={cfg.p})")
    print(f"mutual coherence: {mutual_coherence(D):.6f}")
    print(f"spectral norm squared: {spectral_norm_sq(D):.6f}")
    if cfg.K:
        print(f"file also holds {cfg.K} lambda network(s)")
    if args.figure:
        from .report import dictionary_atoms

        dictionary_atoms(D, args.figure)
    return EXIT_OK if dev <= 1e-9 else EXIT_DATA


# -- model -----------------------------------------------------------------

def cmd_model_inspect(args) -> int:
    if args.file:
        params, cfg = load_model(args.file)
        print(f"model file: {args.file}")
        print(f"patch_side={cfg.patch_side} p={cfg.p} m={cfg.m} T={cfg.T} K={cfg.K} sigma={cfg.sigma:g}")
        print(f"c={params.c:.6g} w range=[{params.w.min():.4g}, {params.w.max():.4g}]")
        if params.n_scalars() != _count(cfg):
            raise DataError("stored arrays disagree with the parameter count")
    else:
        try:
            cfg = ModelConfig(patch_side=args.patch_side, m=args.m, T=args.T, K=args.K)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        print(f"config: patch_side={cfg.patch_side} p={cfg.p} m={cfg.m} T={cfg.T} K={cfg.K}")
    print(param_count_note(cfg))
    return EXIT_OK


def _count(cfg: ModelConfig) -> int:
    from .model import param_count

    return param_count(cfg)


# -- denoise ---------------------------------------------------------------

DENOISE_MODES = ("classic", "adaptive", "lksvd")


def _classic_config(args, sigma: float, p: int, m: int, threads: int) -> ClassicConfig:
    return ClassicConfig(sigma=sigma, patch_side=int(round(np.sqrt(p))), m=m,
                         error_gain=args.error_gain, mu_gain=args.mu_gain,
                         adapt_rounds=args.rounds, threads=threads)


def run_method(method: str, Y, sigma: float, args, threads: int, D=None, params=None):
    """Denoise ``Y`` with one of the three methods; returns the estimate."""
    if method == "classic":
        if D is None:
            D = overcomplete_dct(args.patch_side ** 2, args.m)
        cfg = _classic_config(args, sigma, D.shape[0], D.shape[1], threads)
        stats = ClassicStats()
        out = denoise_universal(Y, D, cfg, stats)
        if stats.capped:
            log.info("sparsity cap reached on %d of %d patches", stats.capped, stats.n_patches)
        return out
    if method == "adaptive":
        cfg = _classic_config(args, sigma, args.patch_side ** 2, args.m, threads)
        out, _ = denoise_adaptive(Y, cfg)
        return out
    if params is None:
        raise UsageError("lksvd mode needs --model")
    return forward(params, Y)


def _load_lksvd(path, sigma: float):
    params, cfg = load_model(path)
    if cfg.K == 0:
        raise DataError(f"{path} holds a dictionary only; lksvd mode needs a trained or initial model")
    if cfg.sigma and abs(cfg.sigma - sigma) > 1e-9:
        log.warning("model %s was built for sigma=%g, denoising at sigma=%g", path, cfg.sigma, sigma)
    return params


def cmd_denoise(args) -> int:
    mode = args.mode
    if mode not in DENOISE_MODES:
        raise UsageError(f"mode must be one of {', '.join(DENOISE_MODES)}, got {mode!r}")
    _require(args, "input", "sigma", "out")
    if args.sigma <= 0:
        raise UsageError("--sigma must be > 0")
    seed = _resolve_seed(args)
    threads = _threads(args)
    if mode == "lksvd" and not args.model:
        raise UsageError("lksvd mode needs --model")
    src = load_image(args.input)
    if args.add_noise:
        ref = src
        Y = add_noise(src, args.sigma, seed)
    else:
        ref = None
        Y = src
    if args.ref:
        ref = load_image(args.ref)
        if ref.shape != Y.shape:
            raise DataError(f"reference is {ref.shape}, input is {Y.shape}")
    D = _load_dictionary(args.dict) if args.dict else None
    params = _load_lksvd(args.model, args.sigma) if mode == "lksvd" else None
    t0 = time.perf_counter()
    out = run_method(mode, Y, args.sigma, args, threads, D=D, params=params)
    elapsed = time.perf_counter() - t0
    save_image(out, args.out)
    if args.noisy_out:
        save_image(Y, args.noisy_out)
    metrics = {}
    if ref is not None:
        metrics = {"noisy_psnr": psnr(Y, ref), "psnr": psnr(out, ref), "ssim": ssim(out, ref)}
        print(f"noisy    PSNR {metrics['noisy_psnr']:.2f} dB")
        print(f"denoised PSNR {metrics['psnr']:.2f} dB  SSIM {metrics['ssim']:.4f}")
    if args.figure:
        from .report import image_panel

        imgs, titles = [Y, out], ["noisy", mode]
        if ref is not None:
            imgs = [ref] + imgs
            titles = ["clean", f"noisy {metrics['noisy_psnr']:.2f} dB", f"{mode} {metrics['psnr']:.2f} dB"]
        image_panel(imgs, titles, args.figure)
    print(f"wrote {args.out} ({out.shape[1]}x{out.shape[0]})")
    write_manifest(_manifest_for(args, args.out), "denoise", args, metrics=metrics,
                   timings={"denoise_s": round(elapsed, 3)},
                   extra={"noisy.sha256": _digest(Y)})
    return EXIT_OK


def _digest(img) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype="<f8").tobytes()).hexdigest()


# -- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    _require(args, "images", "out")
    seed = _resolve_seed(args)
    if args.sigma <= 0:
        raise UsageError("--sigma must be > 0")
    try:
        cfg = ModelConfig(patch_side=args.p, m=args.m, T=args.T, K=args.K, sigma=args.sigma)
        tcfg = TrainConfig(steps=args.steps, learning_rate=args.lr, crop_size=args.crop, sigma=args.sigma,
                           seed=seed, log_every=args.log_every, checkpoint_every=args.checkpoint_every,
                           checkpoint_path=str(args.out))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.K < 1:
        raise UsageError("--K must be >= 1")
    params, history, start = None, None, 0
    if args.resume and Path(args.out).exists():
        params, saved_cfg, history, start = resume(args.out)
        if saved_cfg != cfg:
            raise DataError(f"checkpoint {args.out} was written with {saved_cfg}, not {cfg}")
        print(f"resuming from step {start}")

    def progress(step, loss, _params):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step:6d}  loss {loss:.6g}")

    t0 = time.perf_counter()
    params, history = train(args.images, cfg, tcfg, params=params, start_step=start, history=history,
                            callback=progress)
    elapsed = time.perf_counter() - t0
    save_model(params, cfg, args.out)
    write_history(history, history_path(args.out))
    metrics = {"steps": len(history)}
    if history:
        from .report import loss_curve

        loss_curve(history, _sibling(args.out, ".loss.png"))
        n = min(100, len(history))
        metrics["loss_first"] = float(np.mean([h[1] for h in history[:n]]))
        metrics["loss_last"] = float(np.mean([h[1] for h in history[-n:]]))
        vals = [h[2] for h in history if h[2] is not None]
        if vals:
            metrics["val_psnr_last"] = vals[-1]
    print(f"wrote {args.out} after {len(history)} steps")
    write_manifest(_manifest_for(args, args.out), "train", args, metrics=metrics,
                   timings={"train_s": round(elapsed, 3)},
                   extra={"dataset.fingerprint": dataset_fingerprint(args.images)})
    return EXIT_OK


# -- eval ------------------------------------------------------------------

EVAL_FIELDS = ("method", "image", "sigma", "noise_seed", "noisy_sha256", "noisy_psnr", "psnr", "ssim")


def noise_seed(seed: int, image_name: str, sigma: float) -> int:
    """Seed for one (image, sigma) pair, independent of the method under test."""
    ss = np.random.SeedSequence([seed, zlib.crc32(image_name.encode()), int(round(sigma * 1000))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def format_table(rows, method: str) -> str:
    head = f"{'image':<16} {'sigma':>6} {'noisy':>8} {'PSNR':>8} {'SSIM':>8}"
    lines = [f"method: {method}", head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['image']:<16} {r['sigma']:>6g} {r['noisy_psnr']:>8.2f} {r['psnr']:>8.2f} "
                     f"{r['ssim']:>8.4f}")
    lines.append("-" * len(head))
    for s in sorted({r["sigma"] for r in rows}):
        sub = [r for r in rows if r["sigma"] == s]
        lines.append(f"{'average':<16} {s:>6g} {np.mean([r['noisy_psnr'] for r in sub]):>8.2f} "
                     f"{np.mean([r['psnr'] for r in sub]):>8.2f} {np.mean([r['ssim'] for r in sub]):>8.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    _require(args, "method", "images", "out_dir")
    if args.method not in DENOISE_MODES:
        raise UsageError(f"--method must be one of {', '.join(DENOISE_MODES)}")
    sigmas = _float_list(args.sigma)
    if any(s <= 0 for s in sigmas):
        raise UsageError("sigmas must be > 0")
    if args.method == "lksvd" and not args.model:
        raise UsageError("lksvd evaluation needs --model (may contain {sigma})")
    seed = _resolve_seed(args)
    threads = _threads(args)
    files = list_images(args.images)
    if args.limit:
        files = files[:args.limit]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    D = _load_dictionary(args.dict) if args.dict else None
    rows, hashes, timings = [], {}, {}
    example = None
    for s in sigmas:
        params = None
        if args.method == "lksvd":
            params = _load_lksvd(args.model.replace("{sigma}", f"{s:g}"), s)
        for f in files:
            X = load_image(f)
            ns = noise_seed(seed, f.name, s)
            Y = add_noise(X, s, ns)
            t0 = time.perf_counter()
            out = run_method(args.method, Y, s, args, threads, D=D, params=params)
            timings[f"{f.stem}.s{s:g}"] = round(time.perf_counter() - t0, 3)
            row = {"method": args.method, "image": f.stem, "sigma": s, "noise_seed": ns,
                   "noisy_sha256": _digest(Y), "noisy_psnr": psnr(Y, X), "psnr": psnr(out, X),
                   "ssim": ssim(out, X)}
            rows.append(row)
            hashes[f"noisy.{f.stem}.s{s:g}"] = row["noisy_sha256"]
            if args.save_images:
                save_image(out, out_dir / f"{f.stem}_s{s:g}_{args.method}.pgm")
            if example is None:
                example = (X, Y, out, row)
    csv_rows = [[r["method"], r["image"], _fmt(r["sigma"]), r["noise_seed"], r["noisy_sha256"],
                 repr(r["noisy_psnr"]), repr(r["psnr"]), repr(r["ssim"])] for r in rows]
    for s in sigmas:
        sub = [r for r in rows if r["sigma"] == s]
        csv_rows.append([args.method, "AVERAGE", _fmt(s), "", "",
                         repr(float(np.mean([r["noisy_psnr"] for r in sub]))),
                         repr(float(np.mean([r["psnr"] for r in sub]))),
                         repr(float(np.mean([r["ssim"] for r in sub])))])
    _write_csv(out_dir / "results.csv", EVAL_FIELDS, csv_rows)
    table = format_table(rows, args.method)
    (out_dir / "results.txt").write_text(table + "\n")
    print(table)
    from .report import image_panel, psnr_bars

    psnr_bars(rows, out_dir / "psnr.png", args.method)
    X, Y, out, row = example
    image_panel([X, Y, out], ["clean", f"noisy {row['noisy_psnr']:.2f} dB",
                              f"{args.method} {row['psnr']:.2f} dB"],
                out_dir / "example.png", suptitle=f"{row['image']}, sigma={row['sigma']:g}")
    metrics = {}
    for s in sigmas:
        sub = [r for r in rows if r["sigma"] == s]
        metrics[f"avg_psnr.s{s:g}"] = float(np.mean([r["psnr"] for r in sub]))
        metrics[f"avg_ssim.s{s:g}"] = float(np.mean([r["ssim"] for r in sub]))
        metrics[f"avg_noisy_psnr.s{s:g}"] = float(np.mean([r["noisy_psnr"] for r in sub]))
    for r in rows:
        metrics[f"{r['image']}.s{r['sigma']:g}.psnr"] = r["psnr"]
        metrics[f"{r['image']}.s{r['sigma']:g}.ssim"] = r["ssim"]
    manifest = Path(args.manifest) if args.manifest else out_dir / "manifest.txt"
    extra = dict(hashes)
    extra["dataset.fingerprint"] = dataset_fingerprint(args.images)
    write_manifest(manifest, "eval", args, metrics=metrics, timings=timings, extra=extra)
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------

def run_gradcheck(seed: int, corrupt: str | None = None, out=print):
    """Run the finite-difference check on the standard configs.

    Returns:
        ``(ok, rows)`` with one row per (config, block).
    """
    rows = []
    ok = True
    for idx, (p, m, T, K) in enumerate(GRADCHECK_CONFIGS):
        cfg = ModelConfig(patch_side=int(round(np.sqrt(p))), m=m, T=T, K=K)
        rng = np.random.default_rng([seed, idx])
        params, Y, X = gradcheck_sample(cfg, rng, KINK_MIN)
        _, grads = backward(params, Y, X)
        if corrupt:
            blocks = dict(grads.blocks())
            key = corrupt if corrupt in blocks else next((k for k in blocks if k.startswith(corrupt)), None)
            if key is None:
                raise UsageError(f"unknown block {corrupt!r}")
            flat = blocks[key].reshape(-1)
            flat[0] += 1e-2 * max(1.0, abs(flat[0]))
        rep = finite_diff_check(params, Y, X, step=GRADCHECK_STEP, grads=grads)
        out(f"config p={p} m={m} T={T} K={K}: {params.n_scalars()} scalars")
        for name, err in rep.per_block.items():
            passed = err < GRADCHECK_TOL
            ok &= passed
            out(f"  d{name:<8} max rel error {err:.3e}  {'ok' if passed else 'FAIL'}")
            rows.append((p, m, T, K, f"d{name}", repr(err), "pass" if passed else "fail"))
    return ok, rows


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args)
    t0 = time.perf_counter()
    ok, rows = run_gradcheck(seed, args.corrupt)
    elapsed = time.perf_counter() - t0
    print(f"gradcheck {'PASSED' if ok else 'FAILED'} (tolerance {GRADCHECK_TOL:g}, seed {seed})")
    if args.out:
        _write_csv(args.out, ("p", "m", "T", "K", "block", "max_rel_error", "status"), rows)
    path = _manifest_for(args, args.out)
    if path:
        write_manifest(path, "gradcheck", args, metrics={"passed": ok},
                       timings={"gradcheck_s": round(elapsed, 3)})
    return EXIT_OK if ok else EXIT_FAIL


# -- bench -----------------------------------------------------------------

def _bench_inputs(size: int, seed: int):
    img = load_image(Path(__file__).with_name("data") / "camera.pgm")
    reps = int(np.ceil(size / img.shape[0]))
    img = np.tile(img, (reps, reps))[:size, :size]
    return img, add_noise(img, 25.0, seed)


def cmd_bench(args) -> int:
    seed = _resolve_seed(args)
    thread_counts = _int_list(args.threads_list) if args.threads_list else [1, os.cpu_count() or 1]
    thread_counts = sorted(set(thread_counts))
    if args.repeats < 1 or any(t < 1 for t in thread_counts):
        raise UsageError("--repeats and thread counts must be >= 1")
    X, Y = _bench_inputs(args.size, seed)
    ps = extract_patches(Y, 8)
    D = overcomplete_dct(64, 256)
    omp_cfg = OmpConfig(sigma=25.0)
    params = init_params(ModelConfig(patch_side=8, m=256, T=7, K=1, sigma=25.0), seed)
    lam, _ = mlp_forward(params.mlps[0], ps.patches)
    lam = lam / 255.0 * 25.0  # any nonnegative lambda exercises the same arithmetic

    def job_extract(_t):
        return extract_patches(Y, 8).count

    def job_omp(t):
        omp_batch(D, ps.patches, omp_cfg, threads=t)
        return ps.count

    def job_ista(_t):
        sparse_code(params.D, ps.patches, lam, params.c, params.T)
        return ps.count

    def job_denoise(t):
        denoise_universal(Y, D, ClassicConfig(sigma=25.0, threads=t))
        return 1

    jobs = [("extract_patches", job_extract, "patches"), ("omp", job_omp, "patches"),
            ("ista_T7", job_ista, "patches"), ("denoise_classic", job_denoise, "images")]
    rows = []
    rates = {}
    for name, job, unit in jobs:
        for t in thread_counts:
            for r in range(args.repeats):
                t0 = time.perf_counter()
                n = job(t)
                dt = time.perf_counter() - t0
                rows.append((name, t, r, unit, f"{dt:.6f}", n, f"{n / dt:.3f}"))
                rates.setdefault((name, t), []).append(n / dt)
    for (name, t), vals in rates.items():
        mean, std = _mean_std(vals)
        spread = (max(vals) - min(vals)) / mean if mean else 0.0
        print(f"{name:<16} threads={t:<3} {mean:14.1f} /s  spread {100 * spread:5.1f}%")
        if len(vals) > 1 and spread > 0.4:
            log.warning("%s at %d threads varies by %.0f%% across repeats", name, t, 100 * spread)
    t_lo, t_hi = thread_counts[0], thread_counts[-1]
    if t_hi > t_lo:
        gain = np.mean(rates[("omp", t_hi)]) / np.mean(rates[("omp", t_lo)])
        print(f"omp scaling {t_lo} -> {t_hi} threads: {gain:.2f}x")
        if t_hi >= 4 and gain < 2.0:
            log.warning("omp scaling %.2fx below the 2x soft bound (host has %s cores)",
                        gain, os.cpu_count())
    if args.out:
        _write_csv(args.out, ("benchmark", "threads", "repeat", "unit", "seconds", "items", "items_per_sec"),
                   rows)
    path = _manifest_for(args, args.out)
    if path:
        metrics = {f"{name}.t{t}.per_sec": _mean_std(v)[0] for (name, t), v in rates.items()}
        write_manifest(path, "bench", args, metrics=metrics,
                       extra={"host.cpu_count": os.cpu_count() or 1})
    return EXIT_OK


# -- replay ----------------------------------------------------------------

def cmd_replay(args) -> int:
    kv = read_kv(args.manifest_file)
    command = kv.get("command")
    if not command:
        raise DataError(f"{args.manifest_file} has no command= line")
    argv = command.split() + ["--config", str(args.manifest_file)] + list(args.overrides)
    print(f"replaying: lksvd {' '.join(argv)}")
    return main(argv)


# -- parser ----------------------------------------------------------------

def _common(parser):
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("--seed", type=int, help="random seed; generated and recorded when omitted")
    parser.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    parser.add_argument("--manifest", help="manifest path (default: next to the main output)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _classic_flags(parser):
    parser.add_argument("--patch-side", type=int, default=8)
    parser.add_argument("--m", type=int, default=256, help="number of atoms")
    parser.add_argument("--error-gain", type=float, default=1.15)
    parser.add_argument("--mu-gain", type=float, default=30.0, help="data-term weight is mu_gain/sigma")
    parser.add_argument("--rounds", type=int, default=10, help="adaptive K-SVD rounds")


def build_parser():
    """Return ``(parser, leaves)`` where ``leaves`` maps leaf names to their parsers."""
    parser = ArgParser(prog="lksvd", description="K-SVD and learned K-SVD image denoising")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    leaves = {}

    def leaf(subparsers, name, handler, key, **kw):
        p = subparsers.add_parser(name, **kw)
        _common(p)
        p.set_defaults(handler=handler, leaf=key)
        leaves[key] = p
        return p

    pd = sub.add_parser("dict", help="build, train or inspect dictionaries")
    dsub = pd.add_subparsers(dest="dict_command", metavar="ACTION")
    b = leaf(dsub, "build", cmd_dict_build, "dict build", help="overcomplete DCT dictionary")
    b.add_argument("--p", type=int, default=64, help="pixels per patch (perfect square)")
    b.add_argument("--m", type=int, default=256, help="number of atoms (perfect square)")
    b.add_argument("--keep-mean", action="store_true", help="do not remove the mean of non-DC atoms")
    b.add_argument("--out")
    t = leaf(dsub, "train", cmd_dict_train, "dict train", help="K-SVD on clean patches")
    t.add_argument("--images", help="directory of .pgm images")
    t.add_argument("--rounds", type=int, default=10)
    t.add_argument("--p", type=int, default=64, help="pixels per patch (perfect square)")
    t.add_argument("--m", type=int, default=256)
    t.add_argument("--sigma", type=float, default=0.0, help="OMP error target noise level")
    t.add_argument("--sparsity", type=int, default=4, help="OMP atom cap")
    t.add_argument("--patches", type=int, default=20000, help="training patches sampled (0 = all)")
    t.add_argument("--keep-dc", action="store_true", help="do not subtract patch means")
    t.add_argument("--out")
    i = leaf(dsub, "inspect", cmd_dict_inspect, "dict inspect", help="check a dictionary file")
    i.add_argument("file", nargs="?")
    i.add_argument("--figure", help="PNG of the atoms")

    pm = sub.add_parser("model", help="inspect model files")
    msub = pm.add_subparsers(dest="model_command", metavar="ACTION")
    mi = leaf(msub, "inspect", cmd_model_inspect, "model inspect", help="config and parameter count")
    mi.add_argument("file", nargs="?")
    mi.add_argument("--patch-side", type=int, default=8)
    mi.add_argument("--m", type=int, default=256)
    mi.add_argument("--T", type=int, default=7)
    mi.add_argument("--K", type=int, default=1)

    d = leaf(sub, "denoise", cmd_denoise, "denoise", help="denoise one image")
    d.add_argument("mode", nargs="?", metavar="{classic,adaptive,lksvd}")
    d.add_argument("--in", dest="input", help="input .pgm (clean when --add-noise is given)")
    d.add_argument("--sigma", type=float)
    d.add_argument("--dict", help="dictionary file for classic mode (default: DCT)")
    d.add_argument("--model", help="model file for lksvd mode")
    d.add_argument("--out")
    d.add_argument("--ref", help="clean reference for PSNR/SSIM")
    d.add_argument("--add-noise", action="store_true", help="add Gaussian noise to --in first")
    d.add_argument("--noisy-out", help="also save the noisy input")
    d.add_argument("--figure", help="PNG comparison panel")
    _classic_flags(d)

    tr = leaf(sub, "train", cmd_train, "train", help="train a learned K-SVD model")
    tr.add_argument("--images")
    tr.add_argument("--sigma", type=float, default=25.0)
    tr.add_argument("--p", type=int, default=8, help="patch side length")
    tr.add_argument("--m", type=int, default=256)
    tr.add_argument("--T", type=int, default=7)
    tr.add_argument("--K", type=int, default=3)
    tr.add_argument("--steps", type=int, default=1000)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--crop", type=int, default=128)
    tr.add_argument("--log-every", type=int, default=100)
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    tr.add_argument("--out")

    e = leaf(sub, "eval", cmd_eval, "eval", help="PSNR/SSIM over a directory")
    e.add_argument("--method")
    e.add_argument("--images")
    e.add_argument("--sigma", default="25", help="comma-separated noise levels")
    e.add_argument("--dict")
    e.add_argument("--model", help="model file; {sigma} is replaced by each noise level")
    e.add_argument("--out-dir")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--save-images", action="store_true")
    _classic_flags(e)

    g = leaf(sub, "gradcheck", cmd_gradcheck, "gradcheck", help="finite-difference gradient audit")
    g.add_argument("--out", help="CSV report")
    g.add_argument("--corrupt", help=argparse.SUPPRESS)

    bn = leaf(sub, "bench", cmd_bench, "bench", help="throughput benchmarks")
    bn.add_argument("--threads-list", help="comma-separated thread counts (default: 1,all cores)")
    bn.add_argument("--repeats", type=int, default=3)
    bn.add_argument("--size", type=int, default=256, help="test image side")
    bn.add_argument("--out", help="CSV report")

    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest_file")
    r.add_argument("overrides", nargs=argparse.REMAINDER, help="extra flags, e.g. --out other.pgm")
    r.set_defaults(handler=cmd_replay, leaf="replay")
    return parser, leaves


def _parse(argv):
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "handler", None) is None:
        raise UsageError(parser.format_usage().strip())
    if getattr(args, "config", None):
        apply_config(leaves[args.leaf], args.config)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageFormatError, ModelFormatError, FileNotFoundError, GradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
