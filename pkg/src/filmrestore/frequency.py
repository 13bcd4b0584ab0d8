"""3D-FFT texture reconstruction.

Packed frequency features hold the unitary 3D DFT over (frames, rows, cols)
with channels ``[real | imag]``.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalError
from .layers import attention, merge_heads, num_groups, split_heads, zero_module

IMAG_TOLERANCE = 1e-4


def fft_pack(x: torch.Tensor, dims=(-4, -3, -2)) -> torch.Tensor:
    """``(..., n, h, w, c)`` -> ``(..., n, h, w, 2c)`` unitary 3D DFT, real then imaginary channels."""
    f = torch.fft.fftn(x, dim=dims, norm="ortho")
    return torch.cat([f.real, f.imag], dim=-1)


def ifft_unpack(f: torch.Tensor, dims=(-4, -3, -2), strict: bool = True) -> torch.Tensor:
    """Inverse of :func:`fft_pack`, keeping the real part.

    With ``strict`` the imaginary residue must stay below ``IMAG_TOLERANCE``,
    which holds whenever ``f`` came from a real signal.
    """
    c = f.shape[-1] // 2
    z = torch.complex(f[..., :c], f[..., c:])
    x = torch.fft.ifftn(z, dim=dims, norm="ortho")
    if strict:
        residue = x.imag.abs().max().item() if x.numel() else 0.0
        if residue >= IMAG_TOLERANCE:
            raise NumericalError(f"imaginary residue {residue:.3g} after inverse FFT")
    return x.real


def _to_last(v: torch.Tensor) -> torch.Tensor:
    # (B, n, C, h, w) -> (B, n, h, w, C)
    return v.permute(0, 1, 3, 4, 2)


class FrequencyMLP(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cin, cout), nn.GELU(), nn.Linear(cout, cout))

    def forward(self, x):
        return self.net(x)


class TextureReconstruction(nn.Module):
    """Cross-attention in the frequency domain between the mid feature and
    patch/global reference spectra.

    Tokens are the ``n*h*w`` flattened coefficient positions; token width is
    the packed ``2C`` of the mid feature.
    """

    def __init__(self, channels: int, latent_channels: int, heads: int = 4):
        super().__init__()
        width = 2 * channels
        self.heads = num_groups(width, heads)
        self.patch_mlp = FrequencyMLP(2 * latent_channels, width)
        self.global_mlp = FrequencyMLP(2 * latent_channels, width)
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.to_q = nn.Linear(width, width)
        self.to_kv = nn.Linear(width, 2 * width)
        self.attn_out = nn.Linear(width, width)
        self.proj = zero_module(nn.Linear(channels, channels))

    def forward(self, mid: torch.Tensor, patch_latent: torch.Tensor, global_latent: torch.Tensor) -> torch.Tensor:
        """All inputs ``(B, n, C, h, w)``; references must match the spatial/temporal size of ``mid``."""
        if patch_latent.shape[-2:] != mid.shape[-2:] or patch_latent.shape[1] != mid.shape[1]:
            raise ConfigurationError(f"patch latent {tuple(patch_latent.shape)} does not match mid {tuple(mid.shape)}")
        if global_latent.shape != patch_latent.shape:
            raise ConfigurationError("global reference latent must match the patch latent shape")
        b, n, c, h, w = mid.shape
        fp = self.patch_mlp(fft_pack(_to_last(patch_latent)))
        fg = self.global_mlp(fft_pack(_to_last(global_latent)))
        fm = fft_pack(_to_last(mid))

        q = self.to_q(self.norm_q(fm.reshape(b, n * h * w, 2 * c)))
        kv = torch.cat([fp.reshape(b, n * h * w, -1), fg.reshape(b, n * h * w, -1)], dim=1)
        k, v = self.to_kv(self.norm_kv(kv)).chunk(2, dim=-1)
        out = attention(*(split_heads(a, self.heads) for a in (q, k, v)))
        out = self.attn_out(merge_heads(out)).reshape(b, n, h, w, 2 * c)

        spatial = ifft_unpack(out, strict=False)
        return mid + self.proj(spatial).permute(0, 1, 4, 2, 3)


def texture_module_forward(module: TextureReconstruction, mid, patch_latent, global_latent):
    """Functional wrapper on ``(n, h, w, c)`` grids (single clip)."""
    to_video = lambda a: a.permute(0, 3, 1, 2)[None]
    out = module(to_video(mid), to_video(patch_latent), to_video(global_latent))
    return out[0].permute(0, 2, 3, 1)


def pool_to(x: torch.Tensor, size) -> torch.Tensor:
    """Average-pool a ``(B, n, C, h, w)`` reference to spatial ``size``."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    b, n = x.shape[:2]
    y = F.adaptive_avg_pool2d(x.reshape(b * n, *x.shape[2:]), size)
    return y.reshape(b, n, *y.shape[1:])
