import math

import numpy as np
import pytest

from lksvd.imageops import save_image
from lksvd.model import (C_FLOOR, W_FLOOR, LksvdParams, ModelConfig, StageMlp, encode_model,
                         forward, init_params)
from lksvd.training import (GradientError, Gradients, TrainConfig, all_indices, backward,
                            finite_diff_check, gradcheck_sample, kink_margin, loss_mse, numeric_gradient,
                            random_params, read_history, resume, sgd_step, train, write_history)


def zero_mlps(p, K):
    return [StageMlp(np.zeros((p, 2 * p)), np.zeros((2 * p, p)), np.zeros((p, 1))) for _ in range(K)]


@pytest.fixture
def dataset(tmp_path, rng):
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(2):
        save_image(rng.uniform(0, 255, (24, 24 + 4 * i)), d / f"img{i}.pgm")
    return d


SMALL = ModelConfig(patch_side=2, m=4, T=2, K=1, sigma=25)


def small_tcfg(**kw):
    base = dict(steps=6, learning_rate=1e-3, crop_size=12, sigma=25, seed=5, log_every=3)
    base.update(kw)
    return TrainConfig(**base)


# -- loss ------------------------------------------------------------------

def test_loss_examples():
    assert loss_mse(np.ones((3, 3)), np.ones((3, 3))) == 0.0
    assert loss_mse(np.zeros((3, 3)), np.full((3, 3), 2.0)) == 36.0


def test_loss_two_pass(rng):
    a, b = rng.uniform(0, 255, (2, 9, 7))
    ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel()))
    assert loss_mse(a, b) == pytest.approx(ref, rel=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_mse(np.zeros((2, 2)), np.zeros((2, 3)))


# -- backward --------------------------------------------------------------

def test_backward_zero_mlp_matches_finite_differences(rng):
    cfg = ModelConfig(patch_side=2, m=8, T=2, K=1)
    params = random_params(cfg, rng)
    params.mlps = zero_mlps(4, 1)
    X = rng.uniform(0, 1, (16, 16))
    Y = X + 0.1 * rng.standard_normal((16, 16))
    report = finite_diff_check(params, Y, X, step=1e-5, atol=1e-7)
    assert report.max_rel_error < 1e-4


def test_linear_toy_is_tight(rng):
    # lambda = 0 makes the whole map linear in the image and smooth in D, c, w
    cfg = ModelConfig(patch_side=2, m=4, T=2, K=1)
    params = random_params(cfg, rng)
    params.mlps = zero_mlps(4, 1)
    X = rng.uniform(0, 1, (6, 6))
    Y = X + 0.1 * rng.standard_normal((6, 6))
    assert finite_diff_check(params, Y, X).max_rel_error < 1e-6


def test_c_only_agreement(rng):
    cfg = ModelConfig(patch_side=2, m=4, T=1, K=1)
    params = random_params(cfg, rng)
    params.mlps = zero_mlps(4, 1)
    X = rng.uniform(0, 1, (5, 5))
    Y = X + 0.1 * rng.standard_normal((5, 5))
    _, grads = backward(params, Y, X)
    numeric = numeric_gradient(params, Y, X, "c", 0, 1e-5)
    assert abs(grads.dc - numeric) < 1e-7 * max(1.0, abs(grads.dc))


@pytest.mark.parametrize("cfg", [(2, 8, 2, 1), (2, 8, 3, 2), (4, 32, 2, 1)],
                         ids=["p4m8T2K1", "p4m8T3K2", "p16m32T2K1"])
def test_backward_matches_finite_differences(cfg):
    side, m, T, K = cfg
    mc = ModelConfig(patch_side=side, m=m, T=T, K=K)
    rng = np.random.default_rng(side * 1000 + m * 10 + T + K)
    params, Y, X = gradcheck_sample(mc, rng, min_margin=1e-4)
    indices = all_indices(params)
    if len(indices) > 400:
        pick = rng.choice(len(indices), 400, replace=False)
        indices = [indices[i] for i in sorted(pick)] + [("c", 0)]
    report = finite_diff_check(params, Y, X, step=1e-5, indices=indices)
    assert report.max_rel_error < 1e-4, report.worst


def test_gradcheck_sample_avoids_kinks_and_dead_blocks():
    cfg = ModelConfig(patch_side=2, m=8, T=3, K=2)
    params, Y, X = gradcheck_sample(cfg, np.random.default_rng(1), min_margin=1e-4)
    assert kink_margin(params, Y) >= 1e-4
    _, grads = backward(params, Y, X)
    assert all(np.any(g != 0) for _, g in grads.blocks())


def test_corrupted_gradient_is_detected(rng):
    params, Y, X = gradcheck_sample(ModelConfig(patch_side=2, m=8, T=2, K=1), rng, min_margin=1e-4)
    _, grads = backward(params, Y, X)
    grads.dD[0, 0] += 1e-2
    report = finite_diff_check(params, Y, X, indices=[("D", 0)], grads=grads)
    assert report.max_rel_error > 1e-3


def test_dead_patches_give_no_dictionary_gradient(rng):
    p = 4
    params = random_params(ModelConfig(patch_side=2, m=8, T=3, K=1), rng)
    params.mlps = [StageMlp(np.ones((p, 2 * p)), np.ones((2 * p, p)), np.full((p, 1), 1e6))]
    Y = rng.uniform(1, 2, (6, 6))
    X = rng.uniform(0, 1, (6, 6))
    loss, grads = backward(params, Y, X)
    assert loss == pytest.approx(loss_mse(np.zeros((6, 6)), X))
    assert not np.any(grads.dD)
    assert grads.dc == 0.0
    assert not np.any(grads.dw)


def test_backward_rejects_non_finite(rng):
    params = random_params(ModelConfig(patch_side=2, m=4, T=2, K=1), rng)
    params.D[0, 0] = np.nan
    with pytest.raises(GradientError, match="non-finite gradient"):
        backward(params, np.ones((4, 4)), np.zeros((4, 4)))


def test_gradient_shapes(rng):
    params = random_params(ModelConfig(patch_side=2, m=8, T=2, K=2), rng)
    _, grads = backward(params, rng.uniform(0, 1, (6, 6)), rng.uniform(0, 1, (6, 6)))
    for (n1, a), (n2, g) in zip(params.blocks(), grads.blocks()):
        assert n1 == n2 and np.shape(a) == np.shape(g)


# -- SGD -------------------------------------------------------------------

def test_sgd_zero_grads_unchanged(rng):
    cfg = ModelConfig(patch_side=2, m=4, T=2, K=2)
    params = random_params(cfg, rng)
    out = sgd_step(params, Gradients.zeros_like(params), 1e-4)
    assert encode_model(out, cfg) == encode_model(params, cfg)


def test_sgd_single_scalar(rng):
    params = random_params(SMALL, rng)
    grads = Gradients.zeros_like(params)
    grads.dW2[0][1, 2] = 3.0
    out = sgd_step(params, grads, 1e-4)
    assert out.mlps[0].W2[1, 2] == params.mlps[0].W2[1, 2] - 1e-4 * 3.0
    assert params.mlps[0].W2[1, 2] != out.mlps[0].W2[1, 2]  # input not mutated in place


def test_sgd_clamps_c_and_w(rng):
    params = random_params(SMALL, rng)
    params.c = 0.5
    grads = Gradients.zeros_like(params)
    grads.dc = 1.0
    grads.dw[:] = 1e9
    out = sgd_step(params, grads, 1.0)
    assert out.c == C_FLOOR
    np.testing.assert_array_equal(out.w, W_FLOOR)


def test_sgd_rejects_bad_lr(rng):
    params = random_params(SMALL, rng)
    with pytest.raises(ValueError):
        sgd_step(params, Gradients.zeros_like(params), 0.0)


def test_small_step_does_not_increase_loss():
    cfg = ModelConfig(patch_side=2, m=8, T=3, K=2)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = random_params(cfg, rng)
        X = rng.uniform(0, 1, (8, 8))
        Y = X + 0.1 * rng.standard_normal((8, 8))
        before, grads = backward(params, Y, X)
        after = loss_mse(forward(sgd_step(params, grads, 1e-6), Y), X)
        assert after <= before + 1e-9


# -- training loop ---------------------------------------------------------

def test_train_zero_steps_returns_init(dataset):
    params, hist = train(dataset, SMALL, small_tcfg(steps=0))
    assert hist == []
    assert encode_model(params, SMALL) == encode_model(init_params(SMALL, 5), SMALL)


def test_train_deterministic(dataset):
    p1, h1 = train(dataset, SMALL, small_tcfg())
    p2, h2 = train(dataset, SMALL, small_tcfg())
    assert h1 == h2
    assert encode_model(p1, SMALL) == encode_model(p2, SMALL)
    assert all(math.isfinite(loss) for _, loss, _ in h1)
    assert [h[0] for h in h1] == list(range(1, 7))
    assert h1[2][2] is not None and h1[0][2] is None


def test_train_resume_splice(dataset, tmp_path):
    full, hist_full = train(dataset, SMALL, small_tcfg())
    ck = tmp_path / "ck.lksv"
    train(dataset, SMALL, small_tcfg(steps=4, checkpoint_every=2, checkpoint_path=str(ck)))
    params, cfg, hist, start = resume(ck)
    assert start == 4 and cfg == SMALL
    resumed, hist_res = train(dataset, cfg, small_tcfg(), params=params, start_step=start, history=hist)
    assert hist_res == hist_full
    assert encode_model(resumed, SMALL) == encode_model(full, SMALL)


def test_history_csv_roundtrip(tmp_path):
    rows = [(1, 0.1 + 0.2, None), (2, 1e-300, 27.123456789)]
    write_history(rows, tmp_path / "h.csv")
    assert read_history(tmp_path / "h.csv") == rows


def test_train_empty_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(tmp_path, SMALL, small_tcfg())


def test_train_crop_larger_than_images(dataset):
    with pytest.raises(ValueError):
        train(dataset, SMALL, small_tcfg(crop_size=64))


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"steps": -1}])
def test_train_config_invalid(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_overfit_halves_loss(overfit_run):
    assert all(math.isfinite(h[1]) for h in overfit_run["history"])
    assert overfit_run["ratio"] <= 0.5


def test_lksvd_params_copy_is_deep(rng):
    params = random_params(SMALL, rng)
    q = params.copy()
    q.D[0, 0] += 1
    q.mlps[0].W1[0, 0] += 1
    assert q.D[0, 0] != params.D[0, 0]
    assert q.mlps[0].W1[0, 0] != params.mlps[0].W1[0, 0]
    assert isinstance(q, LksvdParams)
