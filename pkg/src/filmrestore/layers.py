"""Shared network layers.

Video tensors inside the networks use the layout ``(B, N, C, H, W)``; 2D
layers fold frames into the batch axis.
"""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import StaleCacheError


def num_groups(channels: int, max_groups: int = 8) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups(channels), channels)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def fold(x: torch.Tensor) -> torch.Tensor:
    b, n = x.shape[:2]
    return x.reshape(b * n, *x.shape[2:])


def unfold(x: torch.Tensor, b: int) -> torch.Tensor:
    return x.reshape(b, x.shape[0] // b, *x.shape[1:])


def attention(q, k, v, mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean, broadcastable to the score matrix, True where a key
    may be attended.
    """
    if mask is not None and mask.dim() < 2:
        mask = mask[None]
    if not return_weights:
        return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    out = w @ v
    return (out, w) if return_weights else out


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, length, dim = x.shape
    return x.reshape(*lead, length, heads, dim // heads).transpose(-2, -3)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, length, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, length, heads * dh)


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, base: int, dim: int):
        super().__init__()
        self.base = base
        self.mlp = nn.Sequential(nn.Linear(base, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.base).to(w.dtype))


class FrameConv(nn.Conv2d):
    """Conv2d applied to every frame of a video tensor."""

    def forward(self, x):
        return unfold(super().forward(fold(x)), x.shape[0])


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: Optional[int] = None, normalize: bool = True):
        super().__init__()
        self.norm1 = norm(cin) if normalize else nn.Identity()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.norm2 = norm(cout) if normalize else nn.Identity()
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        video = x.dim() == 5
        b = x.shape[0]
        h = fold(x) if video else x
        y = self.conv1(F.silu(self.norm1(h)))
        if self.temb is not None:
            e = self.temb(F.silu(temb))
            if video:
                e = e.repeat_interleave(x.shape[1], dim=0)
            y = y + e[:, :, None, None]
        y = self.conv2(F.silu(self.norm2(y)))
        y = y + self.skip(h)
        return unfold(y, b) if video else y


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: Optional[int] = None):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout or cin, 3, stride=2, padding=1)

    def forward(self, x):
        if x.dim() == 5:
            return unfold(self.conv(fold(x)), x.shape[0])
        return self.conv(x)


def _upsample_nearest(x, size):
    n, c, h, w = x.shape
    if size == (2 * h, 2 * w):
        # same values as nearest interpolation, cheaper backward on CPU
        return x[:, :, :, None, :, None].expand(n, c, h, 2, w, 2).reshape(n, c, 2 * h, 2 * w)
    return F.interpolate(x, size=size, mode="nearest")


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: Optional[int] = None):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout or cin, 3, padding=1)

    def forward(self, x, size=None):
        video = x.dim() == 5
        h = fold(x) if video else x
        size = tuple(size or (h.shape[-2] * 2, h.shape[-1] * 2))
        h = self.conv(_upsample_nearest(h, size))
        return unfold(h, x.shape[0]) if video else h


class TemporalAttention(nn.Module):
    """Self-attention along the frame axis at every spatial location."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = num_groups(channels, heads)
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = zero_module(nn.Linear(channels, channels))

    def forward(self, x):
        b, n, c, h, w = x.shape
        tok = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, n, c)
        pos = sinusoidal_embedding(torch.arange(n), c).to(tok)
        q, k, v = self.qkv(self.norm(tok + pos)).chunk(3, dim=-1)
        out = merge_heads(attention(split_heads(q, self.heads), split_heads(k, self.heads), split_heads(v, self.heads)))
        out = self.proj(out).reshape(b, h, w, n, c).permute(0, 3, 4, 1, 2)
        return x + out


class KVCacheStore:
    """Key/value blocks of already-denoised patches at the current timestep.

    Entries are appended per (layer, patch); a patch reads the last
    ``capacity`` predecessors that share its temporal window.
    """

    def __init__(self, capacity: int = 2):
        self.capacity = capacity
        self.timestep = None
        self._entries = {}
        self._current = None

    def reset(self, timestep) -> None:
        self.timestep = timestep
        self._entries = {}
        self._current = None

    def begin_patch(self, index: int, group=None) -> None:
        self._current = (index, group)

    def _check(self, timestep):
        if self.timestep is None or timestep != self.timestep:
            raise StaleCacheError(f"cache filled at timestep {self.timestep}, read at {timestep}")

    def read(self, layer, timestep) -> list:
        self._check(timestep)
        if self._current is None:
            return []
        index, group = self._current
        prev = [e for e in self._entries.get(layer, []) if e[1] == group and e[0] < index]
        return [(k, v) for _, _, k, v in prev[-self.capacity:]] if self.capacity > 0 else []

    def append(self, layer, timestep, k, v) -> None:
        self._check(timestep)
        if self._current is None:
            return
        index, group = self._current
        self._entries.setdefault(layer, []).append((index, group, k.detach(), v.detach()))

    def __len__(self):
        return sum(len(v) for v in self._entries.values())


class SpatialSelfAttention(nn.Module):
    """Per-frame spatial self-attention whose keys/values may be extended by a KV-cache."""

    def __init__(self, channels: int, heads: int = 4, layer_id=None):
        super().__init__()
        self.heads = num_groups(channels, heads)
        self.layer_id = layer_id
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def attend_tokens(self, tokens, cache: Optional[KVCacheStore] = None, timestep=None, return_weights=False):
        """``tokens``: ``(batch, L, C)``. Returns the attention output before the residual add."""
        q, k, v = self.qkv(self.norm(tokens)).chunk(3, dim=-1)
        q, k, v = (split_heads(a, self.heads) for a in (q, k, v))
        kk, vv = k, v
        if cache is not None:
            prev = cache.read(self.layer_id, timestep)
            if prev:
                kk = torch.cat([pk for pk, _ in prev] + [k], dim=-2)
                vv = torch.cat([pv for _, pv in prev] + [v], dim=-2)
            cache.append(self.layer_id, timestep, k, v)
        out = attention(q, kk, vv, return_weights=return_weights)
        if return_weights:
            out, w = out
            return self.proj(merge_heads(out)), w
        return self.proj(merge_heads(out))

    def forward(self, x, cache: Optional[KVCacheStore] = None, timestep=None):
        b, n, c, h, w = x.shape
        tok = x.permute(0, 1, 3, 4, 2).reshape(b * n, h * w, c)
        out = self.attend_tokens(tok, cache, timestep)
        return x + out.reshape(b, n, h, w, c).permute(0, 1, 4, 2, 3)
