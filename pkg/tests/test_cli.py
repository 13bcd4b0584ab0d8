import csv
import subprocess
import sys

import numpy as np
import pytest

from filmrestore.cli import METRIC_COLUMNS, run_cli
from filmrestore.synthdata import list_samples, read_frames

TINY_CFG = """
frames = 8
height = 32
width = 32
num_clips = 2
patch_frames = 4
patch_size = 16
overlap_frames = 2
overlap_pixels = 8
stride = 4
ae_width = 8
unet_width = 16
preprocess_width = 8
fusion_dim = 16
global_size = 32
global_patch = 8
heads = 2
batch = 2
ae_batch = 2
ae_steps = 2
steps = 2
ckpt_every = 2
sampler_steps = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data, ckpt = root / "data", root / "ckpt"
    assert run_cli(["synth", "--config", str(cfg), "--out", str(data), "--seed", "3"]) == 0
    for stage in ("0", "1", "2"):
        assert run_cli(["train", "--config", str(cfg), "--out", str(ckpt), "--stage", stage,
                        "--dataset", str(data)]) == 0
    return root, cfg, data, ckpt


def test_train_writes_artifacts(workspace):
    _, _, _, ckpt = workspace
    for stage in (0, 1, 2):
        assert (ckpt / f"stage{stage}.pt").is_file()
        assert (ckpt / f"stage{stage}_loss.png").stat().st_size > 0
        assert (ckpt / f"stage{stage}_config.txt").read_text().startswith("seed = ")


def test_restore_and_eval(workspace):
    root, cfg, data, ckpt = workspace
    out, dbg = root / "restored", root / "debug"
    assert run_cli(["restore", "--config", str(cfg), "--out", str(out), "--input", str(data),
                    "--checkpoint", str(ckpt / "stage2.pt"), "--debug-dir", str(dbg)]) == 0
    samples = list_samples(data)
    for s in samples:
        assert read_frames(out / s.name).shape == (8, 32, 32, 3)
        assert (dbg / s.name / "sampler_steps.png").is_file()
    ev = root / "eval"
    assert run_cli(["eval", "--out", str(ev), "--dataset", str(data), "--restored", str(out)]) == 0
    rows = list(csv.reader(open(ev / "metrics.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS and rows[-1][0] == "mean" and len(rows) == len(samples) + 2
    assert (ev / f"preview_{samples[0].name}.png").is_file()


def test_eval_of_clean_against_itself(workspace, tmp_path):
    _, _, data, _ = workspace
    fake = tmp_path / "restored"
    for s in list_samples(data):
        (fake / s.name).parent.mkdir(parents=True, exist_ok=True)
        (fake / s.name).symlink_to(s / "clean")
    assert run_cli(["eval", "--out", str(tmp_path / "ev"), "--dataset", str(data), "--restored", str(fake),
                    "--no-previews"]) == 0
    mean = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))[-1]
    assert float(mean["psnr_full"]) == 99.0 and float(mean["ssim_full"]) == 1.0


def test_synth_is_reproducible(tmp_path, workspace):
    _, cfg, _, _ = workspace
    for name in ("a", "b"):
        assert run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "7",
                        "--num-clips", "1"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert run_cli(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert run_cli(["synth", "--out", str(tmp_path / "x"), "--set", "patch_size=0"]) == 2
    assert run_cli(["eval", "--out", str(tmp_path / "e"), "--dataset", str(tmp_path / "missing")]) == 1
    assert run_cli(["restore", "--out", str(tmp_path / "r"), "--input", str(tmp_path),
                    "--checkpoint", str(tmp_path / "none.pt")]) == 2
    assert "error" in capsys.readouterr().err
    assert run_cli(["train", "--out", str(tmp_path)]) == 2  # argparse: missing --stage


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "filmrestore.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
