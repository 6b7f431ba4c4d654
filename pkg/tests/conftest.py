import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import lksvd  # noqa: E402

DATA_DIR = Path(lksvd.__file__).with_name("data")


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def overfit_run():
    """The single-image overfit recipe, shared by the training and acceptance tests."""
    import tempfile
    import time

    from lksvd.imageops import add_noise, load_image, psnr, save_image
    from lksvd.model import ModelConfig, forward, init_params
    from lksvd.training import TrainConfig, train

    X = load_image(DATA_DIR / "camera.pgm")[64:128, 96:160]
    cfg = ModelConfig(patch_side=8, m=64, T=5, K=1, sigma=25)
    tcfg = TrainConfig(steps=2000, learning_rate=1e-4, crop_size=64, sigma=25, seed=0, log_every=500)
    with tempfile.TemporaryDirectory() as d:
        save_image(X, Path(d) / "crop.pgm")
        t0 = time.perf_counter()
        params, history = train(d, cfg, tcfg)
        elapsed = time.perf_counter() - t0
    Y = add_noise(X, 25, 2024)
    losses = np.array([h[1] for h in history])
    return {
        "history": history,
        "ratio": float(losses[-100:].mean() / losses[:100].mean()),
        "psnr_init": psnr(forward(init_params(cfg, tcfg.seed), Y), X),
        "psnr_trained": psnr(forward(params, Y), X),
        "seconds": elapsed,
    }


ACCEPTANCE_LINES = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
