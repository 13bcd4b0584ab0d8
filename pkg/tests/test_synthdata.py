import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from filmrestore.errors import ConfigurationError, CorruptDatasetError, InputError
from filmrestore.synthdata import (DEFECT_KINDS, DefectTemplate, DegradeConfig, FrameVolume, SynthConfig,
                                   colorize_and_composite, compute_defect_mask, degrade_quality, make_template,
                                   procedural_clip, read_sample, synthesize_dataset, synthesize_sample,
                                   write_sample)


def clip(seed=0, n=4, h=32, w=32, c=3):
    return FrameVolume(np.random.default_rng(seed).random((n, h, w, c), dtype=np.float32))


def test_near_identity_degradation():
    vol = procedural_clip(3, 4, 32, 32)
    out = degrade_quality(vol, DegradeConfig(1.0, 95, 0.0))
    assert out.shape == vol.shape
    assert np.abs(out.data - vol.data).max() <= 0.05


def test_grain_variance_monte_carlo():
    g = 0.08
    vol = FrameVolume(np.full((8, 128, 128, 1), 0.5, dtype=np.float32))
    out = degrade_quality(vol, DegradeConfig(1.0, None, g), seed=5)
    var = out.data.var()
    assert out.data.size >= 10**5
    assert abs(var - g * g) <= 0.2 * g * g


def test_rescale_spreads_a_line():
    img = np.zeros((1, 32, 32, 1), dtype=np.float32)
    img[..., 16, :] = 1.0
    img = np.swapaxes(img, 1, 2).copy()  # vertical line at x=16
    out = degrade_quality(FrameVolume(img), DegradeConfig(0.5, None, 0.0))
    support = (out.data[0, 16, :, 0] > 1e-3).sum()
    assert support >= 2


def test_degrade_rejects_bad_config():
    for cfg in (DegradeConfig(0.0), DegradeConfig(1.5), DegradeConfig(1.0, 95, -0.1)):
        with pytest.raises(ConfigurationError):
            degrade_quality(clip(), cfg)


def test_degrade_deterministic():
    cfg = DegradeConfig(0.7, 40, 0.05)
    assert degrade_quality(clip(), cfg, seed=9) == degrade_quality(clip(), cfg, seed=9)


def test_composite_identity_and_full_opacity():
    vol = clip()
    assert colorize_and_composite(vol, []) == vol
    t = DefectTemplate(np.ones((4, 32, 32)), (1.0, 1.0, 1.0), "sparse_dust")
    np.testing.assert_array_equal(colorize_and_composite(vol, [t]).data, 1.0)


def test_composite_blend_arithmetic():
    vol = FrameVolume(np.full((1, 4, 4, 3), 0.2, dtype=np.float32))
    a = np.zeros((1, 4, 4))
    a[0, 1, 2] = 0.5
    out = colorize_and_composite(vol, [DefectTemplate(a, (1.0, 1.0, 1.0), "sparse_dust")])
    np.testing.assert_allclose(out.data[0, 1, 2], 0.6, atol=1e-6)
    np.testing.assert_allclose(out.data[0, 0, 0], 0.2, atol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_composite_is_convex(seed, k):
    rng = np.random.default_rng(seed)
    vol = clip(seed, 2, 8, 8)
    ts = [DefectTemplate(rng.random((2, 8, 8)), tuple(rng.random(3)), "constant_scratch") for _ in range(k)]
    out = colorize_and_composite(vol, ts).data
    alphas = np.stack([t.alpha for t in ts])
    owner = alphas.argmax(0)
    color = np.array([t.color for t in ts], dtype=np.float32)[owner]
    lo, hi = np.minimum(vol.data, color), np.maximum(vol.data, color)
    assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)


def test_mask_threshold_boundary():
    assert compute_defect_mask([], shape=(2, 3, 3)).sum() == 0
    ones = DefectTemplate(np.ones((2, 3, 3)), (0, 0, 0), "sparse_dust")
    assert compute_defect_mask([ones], 0.02).all()
    at = DefectTemplate(np.full((2, 3, 3), np.float32(0.02)), (0, 0, 0), "sparse_dust")
    assert compute_defect_mask([at], float(np.float32(0.02))).sum() == 0


@pytest.mark.parametrize("kind", DEFECT_KINDS)
def test_templates_are_sparse(kind):
    t = make_template(kind, 8, 64, 64, np.random.default_rng(1))
    assert t.kind == kind
    assert t.alpha.shape == (8, 64, 64)
    assert ((t.alpha > 0).mean(axis=(1, 2)) < 0.4).all()


def test_sample_zero_defects_identity():
    cfg = SynthConfig(num_defects=(0, 0), rescale_range=(1.0, 1.0), quality_range=None, grain_range=(0.0, 0.0))
    vol = procedural_clip(0, 8, 16, 16)
    s = synthesize_sample(vol, 3, cfg)
    assert s.degraded == vol
    assert s.mask.sum() == 0


def test_sample_too_short():
    with pytest.raises(InputError):
        synthesize_sample(procedural_clip(0, 4, 16, 16), 0, SynthConfig(min_frames=8))


def test_sample_deterministic_and_masks_union():
    vol = procedural_clip(1, 8, 32, 32)
    a, b = synthesize_sample(vol, 77), synthesize_sample(vol, 77)
    assert a == b
    # recompute templates with the same draws and take the union of their supports
    rng = np.random.default_rng(77)
    rng.uniform(0.5, 1.0), rng.integers(30, 96), rng.uniform(0.0, 0.08), rng.integers(2**31)
    k = int(rng.integers(2, 6))
    union = np.zeros((8, 32, 32), dtype=bool)
    for _ in range(k):
        t = make_template(DEFECT_KINDS[int(rng.integers(5))], 8, 32, 32, rng)
        union |= t.alpha > 0.02
    np.testing.assert_array_equal(a.mask.astype(bool), union)


def test_defects_touch_only_masked_pixels():
    vol = procedural_clip(2, 8, 32, 32)
    cfg = SynthConfig(rescale_range=(1.0, 1.0), quality_range=None, grain_range=(0.0, 0.0))
    s = synthesize_sample(vol, 11, cfg)
    un = s.mask == 0
    np.testing.assert_array_equal(s.degraded.data[un], vol.data[un])
    assert s.mask.any()


def test_write_read_round_trip(tmp_path):
    s = synthesize_sample(procedural_clip(4, 8, 16, 24), 5)
    write_sample(s, tmp_path / "x")
    r = read_sample(tmp_path / "x")
    assert np.abs(r.degraded.data - s.degraded.data).max() <= 1 / 255 + 1e-7
    assert np.abs(r.clean.data - s.clean.data).max() <= 1 / 255 + 1e-7
    np.testing.assert_array_equal(r.mask, s.mask)
    assert r.caption == s.caption and r.shot_meta == s.shot_meta and r.seed == 5


def test_read_sample_corruption(tmp_path):
    s = synthesize_sample(procedural_clip(4, 8, 16, 16), 5)
    write_sample(s, tmp_path / "a")
    (tmp_path / "a" / "mask" / "000003.png").unlink()
    with pytest.raises(CorruptDatasetError):
        read_sample(tmp_path / "a")
    write_sample(s, tmp_path / "b")
    (tmp_path / "b" / "manifest.txt").unlink()
    with pytest.raises(CorruptDatasetError):
        read_sample(tmp_path / "b")


def test_dataset_deterministic(tmp_path):
    synthesize_dataset(tmp_path / "a", 2, 7, frames=8, height=16, width=16)
    synthesize_dataset(tmp_path / "b", 2, 7, frames=8, height=16, width=16)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_frame_volume_validation():
    with pytest.raises(InputError):
        FrameVolume(np.full((1, 2, 2, 3), 1.5))
    with pytest.raises(InputError):
        FrameVolume(np.zeros((1, 2, 2, 2)))
