import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from filmrestore.errors import ConfigurationError, NumericalError
from filmrestore.frequency import TextureReconstruction, fft_pack, ifft_unpack, texture_module_forward


def test_dc_only_for_constant():
    x = torch.full((2, 4, 4, 3), 0.7, dtype=torch.float64)
    f = fft_pack(x)
    assert f.shape == (2, 4, 4, 6)
    np.testing.assert_allclose(f[0, 0, 0, :3].numpy(), 0.7 * np.sqrt(32), atol=1e-12)
    f2 = f.clone()
    f2[0, 0, 0] = 0
    assert f2.abs().max() < 1e-12


def test_zero_and_round_trip():
    assert torch.equal(ifft_unpack(torch.zeros(2, 3, 3, 4)), torch.zeros(2, 3, 3, 2))
    x = torch.randn(4, 8, 8, 4, dtype=torch.float64)
    torch.testing.assert_close(ifft_unpack(fft_pack(x)), x, atol=1e-10, rtol=0)


def test_numpy_oracle():
    x = torch.randn(3, 5, 4, 2, dtype=torch.float64)
    ref = np.fft.fftn(x.numpy(), axes=(0, 1, 2), norm="ortho")
    f = fft_pack(x).numpy()
    np.testing.assert_allclose(f[..., :2], ref.real, atol=1e-12)
    np.testing.assert_allclose(f[..., 2:], ref.imag, atol=1e-12)


def test_mean_filter_oracle():
    x = torch.randn(2, 4, 6, 3, dtype=torch.float64)
    f = fft_pack(x)
    keep = torch.zeros_like(f)
    keep[0, 0, 0] = f[0, 0, 0]
    out = ifft_unpack(keep)
    torch.testing.assert_close(out, x.mean(dim=(0, 1, 2), keepdim=True).expand_as(x), atol=1e-12, rtol=0)


def test_strict_rejects_asymmetric_spectrum():
    f = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
    f[0, 0, 1, 1] = 1.0  # lone imaginary coefficient
    with pytest.raises(NumericalError):
        ifft_unpack(f)
    assert ifft_unpack(f, strict=False).shape == (2, 2, 2, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_and_parseval(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 4, 2, generator=g, dtype=torch.float64)
    y = torch.randn(2, 3, 4, 2, generator=g, dtype=torch.float64)
    torch.testing.assert_close(fft_pack(a * x + b * y), a * fft_pack(x) + b * fft_pack(y), atol=1e-9, rtol=1e-9)
    assert abs(torch.linalg.norm(fft_pack(x)) - torch.linalg.norm(x)) <= 1e-9 * torch.linalg.norm(x)


def test_texture_identity_at_init_and_shape():
    torch.manual_seed(0)
    m = TextureReconstruction(8, 4, heads=2)
    mid = torch.randn(4, 3, 3, 8)
    z = torch.randn(4, 3, 3, 4)
    out = texture_module_forward(m, mid, z, torch.randn_like(z))
    assert torch.equal(out, mid)


def test_texture_resolution_mismatch():
    m = TextureReconstruction(8, 4)
    with pytest.raises(ConfigurationError):
        m(torch.randn(1, 2, 8, 4, 4), torch.randn(1, 2, 4, 3, 3), torch.randn(1, 2, 4, 3, 3))


def test_texture_gradient_matches_finite_differences():
    torch.manual_seed(1)
    m = TextureReconstruction(2, 2, heads=1).double()
    with torch.no_grad():
        m.proj.weight.normal_()
        m.proj.bias.normal_()
    mid = torch.randn(2, 4, 4, 2, dtype=torch.float64, requires_grad=True)
    pz = torch.randn(2, 4, 4, 2, dtype=torch.float64, requires_grad=True)
    gz = torch.randn(2, 4, 4, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b, c: texture_module_forward(m, a, b, c), (mid, pz, gz),
                                    eps=1e-6, atol=1e-6, rtol=1e-3)
