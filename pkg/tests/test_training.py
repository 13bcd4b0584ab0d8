import itertools

import numpy as np
import pytest
import torch

from filmrestore.backbone import PreprocessOutput
from filmrestore.config import RunConfig
from filmrestore.errors import ConfigurationError, InputError
from filmrestore.synthdata import SynthConfig, synthesize_dataset
from filmrestore.training import (LossReport, LossWeights, NoiseSchedule, PatchSampler, Trainer, add_noise,
                                  load_model, loss_defect, loss_noise, loss_preprocess, loss_total, read_checkpoint)

TINY_RUN = dict(frames=8, height=32, width=32, patch_frames=4, patch_size=16, overlap_frames=2, overlap_pixels=8,
                stride=4, ae_width=8, unet_width=16, preprocess_width=8, fusion_dim=16, global_size=32,
                global_patch=8, heads=2, batch=2, ae_batch=4, ae_steps=3, steps=3, log_every=1, ckpt_every=2,
                sampler_steps=4)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    synthesize_dataset(root, 3, 0, SynthConfig(min_frames=8), 8, 32, 32)
    return root


def run_cfg(dataset, ckpt, **kw):
    return RunConfig({**TINY_RUN, "dataset_root": str(dataset), "checkpoint_dir": str(ckpt), **kw})


# ---- schedule

def test_schedule_closed_form():
    s = NoiseSchedule(1000)
    betas = np.linspace(1e-4, 0.02, 1000)
    np.testing.assert_allclose(s.alphas_cumprod.numpy(), np.cumprod(1 - betas), rtol=1e-12)
    z0 = torch.randn(2, 3, dtype=torch.float64)
    eps = torch.randn(2, 3, dtype=torch.float64)
    ab = float(np.prod(1 - betas[:501]))
    torch.testing.assert_close(add_noise(s, z0, 500, eps), np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps)
    torch.testing.assert_close(add_noise(s, z0, 0, torch.zeros_like(z0)), np.sqrt(1 - 1e-4) * z0)
    zt = add_noise(s, z0, 999, eps)
    assert abs(float(s.alphas_cumprod[999])) < 1e-4 and torch.allclose(zt, eps, atol=0.02)
    with pytest.raises(InputError):
        add_noise(s, z0, 1000, eps)


def test_sampler_timesteps_and_ddim_exactness():
    s = NoiseSchedule(1000)
    ts = s.sampler_timesteps(20)
    assert ts[0] == 999 and ts[-1] == 49 and len(ts) == 20 and all(a - b == 50 for a, b in zip(ts, ts[1:]))
    z0 = torch.rand(4, dtype=torch.float64) * 2 - 1
    eps = torch.randn(4, dtype=torch.float64)
    z = s.add_noise(z0, ts[0], eps)
    # a perfect noise predictor walks back to z0 exactly
    for t, tp in zip(ts, ts[1:] + [-1]):
        z = s.ddim_step(z, eps, t, tp)
    torch.testing.assert_close(z, z0, atol=1e-9, rtol=0)


# ---- losses against brute-force loops

def brute_mse(a, b):
    flat = list(zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()))
    return sum((x - y) ** 2 for x, y in flat) / len(flat)


def test_loss_noise_oracle():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(2, 8, 8, 3, generator=g, dtype=torch.float64), torch.randn(2, 8, 8, 3, generator=g, dtype=torch.float64)
    assert abs(float(loss_noise(a, b)) - brute_mse(a, b)) < 1e-7
    assert float(loss_noise(a, a)) == 0.0


def area_down(img, f):
    # img (n, H, W, C) numpy
    n, h, w, c = img.shape
    out = np.zeros((n, h // f, w // f, c))
    for i, y, x in itertools.product(range(n), range(h // f), range(w // f)):
        out[i, y, x] = img[i, y * f:(y + 1) * f, x * f:(x + 1) * f].mean(axis=(0, 1))
    return out


def test_loss_preprocess_oracle():
    rng = np.random.default_rng(1)
    gt = rng.random((2, 8, 8, 3))
    preds = [rng.random((2, 8 >> j, 8 >> j, 3)) for j in range(3)]
    want = 0.0
    for j, p in enumerate(preds):
        tgt = area_down(gt, 2**j)
        want += sum(abs(a - b) for a, b in zip(p.ravel(), tgt.ravel())) / p.size
    got = loss_preprocess([torch.from_numpy(p) for p in preds], torch.from_numpy(gt), channels_last=True, scales=3)
    assert abs(float(got) - want) < 1e-7
    exact = loss_preprocess([torch.from_numpy(area_down(gt, 2**j)) for j in range(3)], torch.from_numpy(gt),
                            channels_last=True)
    assert float(exact) < 1e-12
    with pytest.raises(ConfigurationError):
        loss_preprocess([torch.from_numpy(p) for p in preds[:2]], torch.from_numpy(gt), channels_last=True, scales=3)
    out = PreprocessOutput(features=None, rgb_pyramid=[torch.from_numpy(p).movedim(-1, -3) for p in preds])
    assert abs(float(loss_preprocess(out, torch.from_numpy(gt).movedim(-1, -3))) - want) < 1e-7


def test_loss_defect_oracle():
    rng = np.random.default_rng(2)
    pred, gt = rng.random((2, 8, 8, 3)), rng.random((2, 8, 8, 3))
    mask = (rng.random((2, 8, 8)) > 0.7).astype(np.uint8)
    total = 0.0
    for i, y, x, c in itertools.product(range(2), range(8), range(8), range(3)):
        total += abs(pred[i, y, x, c] - gt[i, y, x, c]) * mask[i, y, x]
    got = loss_defect(torch.from_numpy(pred), torch.from_numpy(gt), torch.from_numpy(mask), channels_last=True)
    assert abs(float(got) - total / pred.size) < 1e-7
    zero = loss_defect(torch.from_numpy(pred), torch.from_numpy(gt), torch.zeros(2, 8, 8, dtype=torch.uint8), True)
    assert float(zero) == 0.0
    with pytest.raises(InputError):
        loss_defect(torch.from_numpy(pred), torch.from_numpy(gt), torch.full((2, 8, 8), 0.5), channels_last=True)


def test_loss_total_weighting():
    assert loss_total((0.1, 0.2, 0.01)) == 0.1 + 1.0 * 0.2 + 81.0 * 0.01
    assert loss_total(LossReport(1.0, 2.0, 3.0, 0.0), LossWeights(0.5, 2.0)) == 1.0 + 1.0 + 6.0
    with pytest.raises(ConfigurationError):
        LossWeights(-1.0, 1.0)


# ---- trainer

def test_stage_order_and_checkpoints(dataset, tmp_path):
    cfg = run_cfg(dataset, tmp_path)
    with pytest.raises(ConfigurationError):
        Trainer(cfg).train(2)
    r0 = Trainer(cfg).train(0)
    r1 = Trainer(cfg).train(1)
    r2 = Trainer(cfg).train(2)
    for r in (r0, r1, r2):
        assert r.checkpoint.is_file() and len(r.history) == 3
    payload = read_checkpoint(r2.checkpoint)
    assert set(payload["groups"]) == {"autoencoder", "unet_base", "preprocess", "guidance", "fusion", "frequency"}
    assert payload["manifest"]["frozen"][2] == ["autoencoder", "unet_base", "preprocess"]
    assert all(t == 0.0 and b == 0.0 for t, b in r2.frozen_grad_norms)
    # frozen groups are carried over unchanged
    s0, s2 = read_checkpoint(r0.checkpoint), payload
    for k, v in s0["groups"]["unet_base"].items():
        assert torch.equal(v, s2["groups"]["unet_base"][k])
    model = load_model(r2.checkpoint)
    assert model.cfg.stride == 4
    assert (tmp_path / "stage2_loss.csv").read_text().splitlines()[0] == "step,l_noise,l_preprocess,l_defect,l_total"


def test_resume_matches_uninterrupted(dataset, tmp_path):
    base = dict(steps=4, ae_steps=2, ckpt_every=2)
    full = Trainer(run_cfg(dataset, tmp_path / "a", **base)).train(0)
    Trainer(run_cfg(dataset, tmp_path / "b", **base)).train(0)  # writes stage0_latest.pt at step 2
    resumed = Trainer(run_cfg(dataset, tmp_path / "b", **base)).train(0, resume=True)
    a, b = read_checkpoint(full.checkpoint), read_checkpoint(resumed.checkpoint)
    for k, v in a["groups"]["unet_base"].items():
        torch.testing.assert_close(v, b["groups"]["unet_base"][k], atol=1e-6, rtol=0)


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "x.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigurationError):
        read_checkpoint(p)
    with pytest.raises(ConfigurationError):
        read_checkpoint(tmp_path / "missing.pt")


def test_sampler_batch_layout(dataset):
    sp = PatchSampler(dataset, 4, 16, 4, vocab_size=64, max_caption=8)
    b = sp.batch(3, torch.Generator().manual_seed(0))
    assert b["degraded"].shape == (3, 4, 3, 16, 16) and b["global_frames"].shape == (3, 4, 3, 32, 32)
    assert b["mask"].shape == (3, 4, 16, 16) and b["bbox"].shape == (3, 4)
    assert (b["bbox"][:, 2] - b["bbox"][:, 0] == 0.5).all()
    with pytest.raises(ConfigurationError):
        PatchSampler(dataset, 4, 18, 4)


def test_defect_weighting_scales_high_noise_samples(dataset, tmp_path):
    cfg = run_cfg(dataset, tmp_path)
    Trainer(cfg).train(0)
    Trainer(cfg).train(1)
    plain, weighted = Trainer(cfg), Trainer(run_cfg(dataset, tmp_path, defect_weighting="sqrt_abar"))
    model = plain._build_model(2)
    batch = plain.sampler.batch(2, torch.Generator().manual_seed(0))
    with torch.no_grad():
        _, a = plain.guidance_losses(model, batch, torch.Generator().manual_seed(1))
        _, b = weighted.guidance_losses(model, batch, torch.Generator().manual_seed(1))
    assert a.l_noise == b.l_noise and 0 < b.l_defect < a.l_defect
