import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from filmrestore.errors import ConfigurationError, InputError
from filmrestore.inference import (InferenceConfig, Restorer, cosine_weight, grfm_fuse, run_sampler,
                                   tiled_apply)
from filmrestore.patchgrid import build_grid
from filmrestore.synthdata import FrameVolume
from filmrestore.training import NoiseSchedule

SMALL = InferenceConfig(sampler_steps=2, patch_frames=4, patch_size=16, overlap_frames=2, overlap_pixels=8)


def test_cosine_weight_values():
    assert cosine_weight(1000, 1000) == 0.5
    assert abs(cosine_weight(500, 1000) - 0.25) < 1e-15
    assert abs(cosine_weight(0, 1000)) < 1e-15
    with pytest.raises(InputError):
        cosine_weight(1001, 1000)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2000), st.floats(0, 1))
def test_cosine_weight_monotone_in_range(T, frac):
    t = int(frac * T)
    c = cosine_weight(t, T)
    assert 0.0 <= c <= 0.5 + 1e-15
    assert abs(c - 0.25 * (1 + math.cos(math.pi * (T - t) / T))) < 1e-15
    if t > 0:
        assert cosine_weight(t - 1, T) <= c


def test_grfm_fuse_oracle():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(3, 4, 4, 2, generator=g), torch.randn(3, 4, 4, 2, generator=g)
    torch.testing.assert_close(grfm_fuse(a, b, 0.3), 0.7 * a + 0.3 * b)
    assert torch.equal(grfm_fuse(a, b, 0.0), a)
    with pytest.raises(AssertionError):
        grfm_fuse(a, b[:, :3], 0.5)


def test_identity_stub_tiling_is_exact():
    z = torch.randn(12, 20, 28, 4, dtype=torch.float64)
    grid = build_grid((12, 20, 28), (8, 8, 8), (4, 4, 4))
    s = NoiseSchedule(1000)
    out = run_sampler(z, s, s.sampler_timesteps(3), grid, lambda i, spec, zp, t, tp: zp)
    torch.testing.assert_close(out, z, atol=1e-12, rtol=0)


def test_patch_order_does_not_matter_without_cache():
    z = torch.randn(8, 12, 12, 2, dtype=torch.float64)
    grid = build_grid((8, 12, 12), (4, 8, 8), (2, 4, 4))
    fn = lambda i, spec, p: p * 2 + spec.t0
    a = tiled_apply(z, grid, fn)
    b = tiled_apply(z, grid, fn, order=reversed(range(len(grid.specs))))
    assert torch.equal(a, b)


def test_global_residual_is_pulled_in():
    s = NoiseSchedule(1000)
    grid = build_grid((4, 8, 8), (4, 8, 8), (0, 0, 0))
    z = torch.zeros(4, 8, 8, 1, dtype=torch.float64)
    gr = torch.ones_like(z)
    seen = []
    run_sampler(z, s, [999], grid, lambda i, spec, zp, t, tp: seen.append(zp.clone()) or zp, z_gr0=gr,
                generator=torch.Generator().manual_seed(0))
    # c = 0.5 at the first step
    ab = float(s.alphas_cumprod[999])
    noise = torch.randn(z.shape, generator=torch.Generator().manual_seed(0), dtype=z.dtype)
    torch.testing.assert_close(seen[0], 0.5 * (math.sqrt(ab) * gr + math.sqrt(1 - ab) * noise))


@pytest.fixture(scope="module")
def restorer():
    return Restorer(tiny_model(), cfg=SMALL)


def test_restore_shapes_ranges_and_determinism(restorer):
    vid = FrameVolume(np.random.default_rng(0).random((6, 30, 38, 3), dtype=np.float32))
    debug = {}
    a = restorer.restore_video(vid, "a street", debug=debug)
    b = restorer.restore_video(vid, "a street")
    assert a.shape == vid.shape and a.data.min() >= 0 and a.data.max() <= 1
    assert np.array_equal(a.data, b.data)
    assert debug["pre_restored"].shape == vid.shape and len(debug["steps"]) == 2


def test_single_patch_and_grayscale(restorer):
    vid = FrameVolume(np.random.default_rng(1).random((3, 16, 16, 1), dtype=np.float32))
    debug = {}
    out = restorer.restore_video(vid, debug=debug)
    assert out.shape == (3, 16, 16, 1)
    pre = restorer.pre_restore_global(FrameVolume(np.random.default_rng(1).random((3, 40, 24, 3), dtype=np.float32)))
    assert pre.shape == (3, 40, 24, 3)


def test_kv_cache_toggle_runs(restorer):
    vid = FrameVolume(np.random.default_rng(2).random((4, 24, 24, 3), dtype=np.float32))
    off = Restorer(restorer.model, cfg=InferenceConfig(**{**SMALL.__dict__, "kv_cache": False}))
    a, b = restorer.restore_video(vid), off.restore_video(vid)
    # at init the self-attention output feeds zeroed residuals, so the cache cannot change the result
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_bad_patch_config():
    with pytest.raises(ConfigurationError):
        Restorer(tiny_model(), cfg=InferenceConfig(patch_size=18))


def test_restorer_uses_the_trained_schedule():
    r = Restorer(tiny_model(beta_end=0.01), cfg=SMALL)
    assert float(r.schedule.betas[-1]) == pytest.approx(0.01)
