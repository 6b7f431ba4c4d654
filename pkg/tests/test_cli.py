import csv
import re

import numpy as np
import pytest

from lksvd.cli import main, noise_seed, read_kv
from lksvd.imageops import load_image, psnr, save_image
from lksvd.model import load_model


@pytest.fixture
def images(tmp_path, data_dir):
    """Five 64x64 crops of the bundled images."""
    d = tmp_path / "imgs"
    d.mkdir()
    files = sorted(data_dir.glob("*.pgm"))
    for i in range(5):
        save_image(load_image(files[i % 4])[32 * i:32 * i + 64, 48:112], d / f"im{i}.pgm")
    return d


@pytest.fixture
def clean(tmp_path, data_dir):
    path = tmp_path / "clean.pgm"
    save_image(load_image(data_dir / "camera.pgm")[64:192, 64:192], path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- dict ------------------------------------------------------------------

def test_dict_build_and_inspect(tmp_path, capsys):
    code, _, _ = run(capsys, "dict", "build", "--p", 64, "--m", 256, "--out", tmp_path / "d.lksv")
    assert code == 0
    code, out, _ = run(capsys, "dict", "inspect", tmp_path / "d.lksv", "--figure", tmp_path / "a.png")
    assert code == 0
    assert "256 atoms, unit-norm: OK" in out
    assert (tmp_path / "a.png").stat().st_size > 0


def test_dict_build_rejects_non_square(tmp_path, capsys):
    code, _, err = run(capsys, "dict", "build", "--p", 60, "--m", 256, "--out", tmp_path / "d.lksv")
    assert code == 1
    assert "p must be a perfect square" in err


def test_dict_train_error_decreases(images, tmp_path, capsys):
    code, out, _ = run(capsys, "dict", "train", "--images", images, "--rounds", 2, "--patches", 3000,
                       "--seed", 1, "--out", tmp_path / "d.lksv")
    assert code == 0
    errs = [(float(a), float(b)) for a, b in
            re.findall(r"representation error (\S+) after coding, (\S+) after update", out)]
    assert len(errs) == 2
    flat = [e for pair in errs for e in pair]
    assert all(b <= a for a, b in zip(flat, flat[1:]))
    with open(tmp_path / "d.lksv.rounds.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_dict_train_unreadable_dir(tmp_path, capsys):
    code, _, err = run(capsys, "dict", "train", "--images", tmp_path / "missing", "--out", tmp_path / "d")
    assert code == 2
    assert err


# -- model inspect ---------------------------------------------------------

def test_model_inspect_reports_count_difference(capsys):
    code, out, _ = run(capsys, "model", "inspect", "--patch-side", 8, "--m", 256, "--K", 1)
    assert code == 0
    assert "32897" in out and "32865" in out and "p/2" in out


# -- denoise ---------------------------------------------------------------

def test_denoise_classic_and_replay(clean, tmp_path, capsys):
    out_path = tmp_path / "x.pgm"
    code, out, _ = run(capsys, "denoise", "classic", "--in", clean, "--add-noise", "--sigma", 25,
                       "--seed", 7, "--ref", clean, "--out", out_path)
    assert code == 0
    noisy = float(re.search(r"noisy\s+PSNR (\S+) dB", out).group(1))
    den = float(re.search(r"denoised PSNR (\S+) dB", out).group(1))
    assert noisy == pytest.approx(20.17, abs=0.15)
    assert den > noisy
    assert re.search(r"SSIM \d\.\d{4}\b", out)
    manifest = tmp_path / "x.pgm.manifest"
    kv = read_kv(manifest)
    assert kv["command"] == "denoise" and kv["arg.mode"] == "classic" and kv["seed"] == "7"
    code, _, _ = run(capsys, "replay", manifest, "--out", tmp_path / "y.pgm")
    assert code == 0
    assert (tmp_path / "y.pgm").read_bytes() == out_path.read_bytes()
    assert read_kv(tmp_path / "y.pgm.manifest")["noisy.sha256"] == kv["noisy.sha256"]


def test_denoise_records_generated_seed(clean, tmp_path, capsys):
    code, _, _ = run(capsys, "denoise", "classic", "--in", clean, "--add-noise", "--sigma", 25,
                     "--out", tmp_path / "x.pgm")
    assert code == 0
    seed = read_kv(tmp_path / "x.pgm.manifest")["seed"]
    assert seed.isdigit()
    run(capsys, "replay", tmp_path / "x.pgm.manifest", "--out", tmp_path / "y.pgm")
    assert (tmp_path / "y.pgm").read_bytes() == (tmp_path / "x.pgm").read_bytes()


def test_config_file_and_override(clean, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# recipe\nin={clean}\nsigma=50\nseed=3\nadd-noise=true\nout={tmp_path / 'a.pgm'}\n")
    assert run(capsys, "denoise", "classic", "--config", cfg)[0] == 0
    assert read_kv(tmp_path / "a.pgm.manifest")["arg.sigma"] == "50.0"
    code, _, _ = run(capsys, "denoise", "classic", "--config", cfg, "--sigma", 25,
                     "--out", tmp_path / "b.pgm")
    assert code == 0
    kv = read_kv(tmp_path / "b.pgm.manifest")
    assert kv["arg.sigma"] == "25.0" and kv["seed"] == "3"


def test_config_unknown_key(clean, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    code, _, err = run(capsys, "denoise", "classic", "--config", cfg)
    assert code == 1 and "colour" in err


def test_denoise_lksvd_needs_model(clean, tmp_path, capsys):
    code, _, err = run(capsys, "denoise", "lksvd", "--in", clean, "--sigma", 25, "--out", tmp_path / "x.pgm")
    assert code == 1 and "--model" in err


@pytest.mark.parametrize("sigma", [0, -5])
def test_denoise_rejects_nonpositive_sigma(clean, tmp_path, capsys, sigma):
    code, _, _ = run(capsys, "denoise", "classic", "--in", clean, "--sigma", sigma, "--out", tmp_path / "x")
    assert code == 1


def test_denoise_missing_input(tmp_path, capsys):
    code, _, _ = run(capsys, "denoise", "classic", "--in", tmp_path / "nope.pgm", "--sigma", 25,
                     "--out", tmp_path / "x.pgm")
    assert code == 2


def test_denoise_png_input(tmp_path, capsys):
    (tmp_path / "a.pgm").write_bytes(b"\x89PNG\r\n\x1a\n" + bytes(16))
    code, _, err = run(capsys, "denoise", "classic", "--in", tmp_path / "a.pgm", "--sigma", 25,
                       "--out", tmp_path / "x.pgm")
    assert code == 2 and "unsupported format" in err


def test_unknown_command(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "denoise", "magic", "--in", "x", "--sigma", 1, "--out", "y")[0] == 1


# -- train -----------------------------------------------------------------

def test_train_zero_steps_then_denoise(images, clean, tmp_path, capsys):
    model = tmp_path / "m.lksv"
    code, _, _ = run(capsys, "train", "--images", images, "--sigma", 25, "--p", 4, "--m", 16, "--T", 2,
                     "--K", 1, "--steps", 0, "--seed", 1, "--crop", 32, "--out", model)
    assert code == 0
    params, cfg = load_model(model)
    assert cfg.K == 1 and cfg.patch_side == 4
    code, _, _ = run(capsys, "denoise", "lksvd", "--in", clean, "--add-noise", "--seed", 2,
                     "--sigma", 25, "--model", model, "--out", tmp_path / "x.pgm")
    assert code == 0
    assert load_image(tmp_path / "x.pgm").shape == load_image(clean).shape


def test_train_resume_matches_uninterrupted(images, tmp_path, capsys):
    common = ["train", "--images", images, "--sigma", 25, "--p", 2, "--m", 4, "--T", 2, "--K", 2,
              "--crop", 16, "--seed", 4, "--log-every", 2, "--lr", 1e-3]
    assert run(capsys, *common, "--steps", 6, "--out", tmp_path / "full.lksv")[0] == 0
    assert run(capsys, *common, "--steps", 3, "--out", tmp_path / "part.lksv")[0] == 0
    code, out, _ = run(capsys, *common, "--steps", 6, "--resume", "--out", tmp_path / "part.lksv")
    assert code == 0 and "resuming from step 3" in out
    assert (tmp_path / "part.lksv").read_bytes() == (tmp_path / "full.lksv").read_bytes()
    assert ((tmp_path / "part.lksv.history.csv").read_bytes()
            == (tmp_path / "full.lksv.history.csv").read_bytes())


def test_train_replay_identical(images, tmp_path, capsys):
    args = ["train", "--images", images, "--p", 2, "--m", 4, "--T", 2, "--K", 1, "--crop", 16,
            "--steps", 4, "--out", tmp_path / "a.lksv"]
    assert run(capsys, *args)[0] == 0
    assert run(capsys, "replay", tmp_path / "a.lksv.manifest", "--out", tmp_path / "b.lksv")[0] == 0
    assert (tmp_path / "a.lksv").read_bytes() == (tmp_path / "b.lksv").read_bytes()
    assert ((tmp_path / "a.lksv.history.csv").read_bytes()
            == (tmp_path / "b.lksv.history.csv").read_bytes())


def test_train_empty_dataset(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _, _ = run(capsys, "train", "--images", tmp_path / "empty", "--out", tmp_path / "m.lksv")
    assert code == 2


# -- eval ------------------------------------------------------------------

def test_eval_methods_share_noise(images, tmp_path, capsys):
    common = ["eval", "--images", images, "--sigma", "15,25", "--seed", 11, "--limit", 2]
    assert run(capsys, *common, "--method", "classic", "--out-dir", tmp_path / "c")[0] == 0
    code, out, _ = run(capsys, *common, "--method", "adaptive", "--rounds", 1, "--out-dir", tmp_path / "a")
    assert code == 0
    kc, ka = read_kv(tmp_path / "c" / "manifest.txt"), read_kv(tmp_path / "a" / "manifest.txt")
    hashes = {k: v for k, v in kc.items() if k.startswith("noisy.")}
    assert len(hashes) == 4
    assert hashes == {k: v for k, v in ka.items() if k.startswith("noisy.")}
    assert re.search(r"average\s+25\s+\d+\.\d{2}\s+\d+\.\d{2}\s+\d\.\d{4}$", out, re.M)


def test_eval_csv_roundtrip_and_seeds(images, tmp_path, capsys):
    assert run(capsys, "eval", "--method", "classic", "--images", images, "--sigma", 25, "--seed", 5,
               "--limit", 2, "--out-dir", tmp_path / "e")[0] == 0
    with open(tmp_path / "e" / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["image"] for r in rows] == ["im0", "im1", "AVERAGE"]
    assert int(rows[0]["noise_seed"]) == noise_seed(5, "im0.pgm", 25.0)
    mean = np.mean([float(r["psnr"]) for r in rows[:2]])
    assert float(rows[2]["psnr"]) == pytest.approx(mean, rel=1e-12)
    assert float(rows[0]["psnr"]) > float(rows[0]["noisy_psnr"])
    first = (tmp_path / "e" / "results.csv").read_bytes()
    assert run(capsys, "replay", tmp_path / "e" / "manifest.txt", "--out-dir", tmp_path / "f")[0] == 0
    assert (tmp_path / "f" / "results.csv").read_bytes() == first


def test_noise_seed_depends_on_image_and_sigma():
    assert noise_seed(1, "a.pgm", 25) == noise_seed(1, "a.pgm", 25.0)
    assert len({noise_seed(1, "a.pgm", 25), noise_seed(1, "b.pgm", 25), noise_seed(1, "a.pgm", 15),
                noise_seed(2, "a.pgm", 25)}) == 4


# -- gradcheck and bench ---------------------------------------------------

def test_gradcheck_passes_and_lists_blocks(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 0, "--out", tmp_path / "g.csv")
    assert code == 0
    for block in ("dD", "dc", "dw", "dW1[0]", "dW2[0]", "dW3[0]", "dW1[1]", "dW3[1]"):
        assert block in out
    with open(tmp_path / "g.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["status"] == "pass" for r in rows)


def test_gradcheck_detects_injected_bug(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 0, "--corrupt", "D")
    assert code == 3
    assert "FAIL" in out


def test_bench_csv(tmp_path, capsys):
    code, _, _ = run(capsys, "bench", "--size", 32, "--repeats", 2, "--threads-list", "1",
                     "--seed", 0, "--out", tmp_path / "b.csv")
    assert code == 0
    with open(tmp_path / "b.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["benchmark"] for r in rows} == {"extract_patches", "omp", "ista_T7", "denoise_classic"}
    assert all(float(r["items_per_sec"]) > 0 for r in rows)
    kv = read_kv(tmp_path / "b.csv.manifest")
    assert kv["arg.threads_list"] == "1" and "arg.size" in kv

