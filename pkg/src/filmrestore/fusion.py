"""Position-aware global frame / global prompt features and their cross-attention injection."""
from __future__ import annotations

import math
import re
import zlib
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .layers import attention, fold, merge_heads, num_groups, split_heads, unfold, zero_module


def fourier_embed(norm_bbox, bands: int = 8) -> torch.Tensor:
    """Sin/cos features of the four box coordinates at frequencies ``2**k * pi``.

    Layout per coordinate: ``[sin(2^0 pi u) .. sin(2^{L-1} pi u), cos(...) ..]``;
    coordinates are concatenated in (x0, y0, x1, y1) order. Accepts a 4-tuple
    or a ``(B, 4)`` tensor.
    """
    u = torch.as_tensor(norm_bbox, dtype=torch.float64 if not torch.is_tensor(norm_bbox) else None)
    if u.shape[-1] != 4:
        raise InputError(f"bbox must have 4 coordinates, got shape {tuple(u.shape)}")
    if (u < 0).any() or (u > 1).any():
        raise InputError("normalized bbox coordinates must lie in [0, 1]")
    freqs = (2.0 ** torch.arange(bands, dtype=u.dtype)) * math.pi
    args = u[..., :, None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.reshape(*u.shape[:-1], 4 * 2 * bands)


_WORD = re.compile(r"[a-z0-9']+")


def tokenize_caption(caption: str, vocab_size: int = 4096, max_len: int = 64):
    """Hash-bucket word ids (stable crc32) and a validity mask.

    Bucket 0 is reserved for the empty-caption token so a caption never
    yields a fully masked sequence.
    """
    words = _WORD.findall(caption.lower())[:max_len]
    ids = [1 + zlib.crc32(w.encode()) % (vocab_size - 1) for w in words] or [0]
    mask = [True] * len(ids)
    pad = max_len - len(ids)
    return (torch.tensor(ids + [0] * pad, dtype=torch.long),
            torch.tensor(mask + [False] * pad, dtype=torch.bool))


class FrameTokenizer(nn.Module):
    """Small convolutional patch tokenizer for resized global frames.

    Adapter point: any encoder mapping ``(B*n, 3, Hg, Wg)`` to spatial patch
    tokens ``(B*n, K, dim)`` can replace it.
    """

    def __init__(self, dim: int = 64, patch: int = 16, in_ch: int = 3):
        super().__init__()
        self.patch = patch
        self.embed = nn.Conv2d(in_ch, dim, patch, stride=patch)
        self.mix = nn.Conv2d(dim, dim, 3, padding=1, padding_mode="replicate")

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(B, n, 3, Hg, Wg)`` -> ``(B, n, K, dim)``."""
        b = frames.shape[0]
        x = self.embed(fold(frames))
        x = x + self.mix(F.gelu(x))
        return unfold(x.flatten(2).transpose(1, 2), b)


class TextEncoder(nn.Module):
    def __init__(self, dim: int = 64, vocab_size: int = 4096, max_len: int = 64, heads: int = 4):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.heads = num_groups(dim, heads)
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        q, k, v = (split_heads(a, self.heads) for a in self.qkv(self.norm1(x)).chunk(3, dim=-1))
        x = x + self.proj(merge_heads(attention(q, k, v, mask[:, None, None, :])))
        return x + self.mlp(self.norm2(x))


class PositionFusion(nn.Module):
    """Concatenate each token with the projected box embedding, then re-project to width ``dim``."""

    def __init__(self, dim: int, bands: int = 8):
        super().__init__()
        self.bands = bands
        self.box_proj = nn.Linear(4 * 2 * bands, dim)
        self.out = nn.Linear(2 * dim, dim)
        with torch.no_grad():
            # token half starts as identity, box half as zero: a pass-through at init
            self.out.weight[:, :dim].copy_(torch.eye(dim))
            self.out.weight[:, dim:].zero_()
            self.out.bias.zero_()

    def forward(self, tokens: torch.Tensor, femb: torch.Tensor) -> torch.Tensor:
        """``tokens (B, ..., K, d)``, ``femb (B, 8L)``."""
        box = self.box_proj(femb.to(tokens.dtype))
        box = box.reshape(box.shape[0], *([1] * (tokens.dim() - 2)), box.shape[-1]).expand(*tokens.shape[:-1], -1)
        return self.out(torch.cat([tokens, box], dim=-1))


class GlobalCrossAttention(nn.Module):
    """Queries from the mid feature grid, keys/values from global tokens; zero-init residual."""

    def __init__(self, channels: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.heads = num_groups(channels, heads)
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_kv = nn.Linear(ctx_dim, 2 * channels)
        self.proj = zero_module(nn.Linear(channels, channels))

    def attend(self, mid_tokens, ctx_tokens, ctx_mask=None, return_weights=False):
        """``mid_tokens (G, L, C)``, ``ctx_tokens (G, K, d)``, ``ctx_mask (G, K)``."""
        if ctx_tokens.shape[-1] != self.ctx_dim:
            raise ConfigurationError(f"context width {ctx_tokens.shape[-1]} != expected {self.ctx_dim}")
        q = split_heads(self.to_q(self.norm(mid_tokens)), self.heads)
        k, v = (split_heads(a, self.heads) for a in self.to_kv(ctx_tokens).chunk(2, dim=-1))
        mask = None if ctx_mask is None else ctx_mask[:, None, None, :]
        out = attention(q, k, v, mask, return_weights=return_weights)
        if return_weights:
            out, w = out
            return self.proj(merge_heads(out)), w
        return self.proj(merge_heads(out))

    def forward(self, mid: torch.Tensor, ctx: torch.Tensor, ctx_mask: Optional[torch.Tensor] = None):
        """``mid (B, n, C, h, w)``; ``ctx`` is per-frame ``(B, n, K, d)`` or per-video ``(B, M, d)``."""
        b, n, c, h, w = mid.shape
        tok = mid.permute(0, 1, 3, 4, 2).reshape(b * n, h * w, c)
        if ctx.dim() == 3:
            ctx = ctx[:, None].expand(b, n, *ctx.shape[1:])
            if ctx_mask is not None:
                ctx_mask = ctx_mask[:, None].expand(b, n, ctx_mask.shape[-1])
        ctx = ctx.reshape(b * n, *ctx.shape[2:])
        if ctx_mask is not None:
            ctx_mask = ctx_mask.reshape(b * n, -1)
        out = self.attend(tok, ctx, ctx_mask)
        return mid + out.reshape(b, n, h, w, c).permute(0, 1, 4, 2, 3)


class GlobalContextEncoder(nn.Module):
    """Builds position-aware global-frame and global-prompt features for one patch."""

    def __init__(self, dim: int = 64, bands: int = 8, global_size: int = 128, global_patch: int = 16,
                 vocab_size: int = 4096, max_len: int = 64, heads: int = 4):
        super().__init__()
        self.bands = bands
        self.global_size = global_size
        self.frames = FrameTokenizer(dim, global_patch)
        self.text = TextEncoder(dim, vocab_size, max_len, heads)
        self.frame_position = PositionFusion(dim, bands)
        self.prompt_position = PositionFusion(dim, bands)

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Resize ``(B, n, 3, H, W)`` global frames to the tokenizer size and tokenize."""
        b, n = frames.shape[:2]
        g = self.global_size
        x = fold(frames)
        if x.shape[-2:] != (g, g):
            x = F.interpolate(x, size=(g, g), mode="bilinear", align_corners=False, antialias=True)
        return self.frames(unfold(x, b))

    def forward(self, frames, bbox, token_ids=None, token_mask=None):
        femb = fourier_embed(bbox, self.bands)
        frame_feat = self.frame_position(self.encode_frames(frames), femb)
        prompt_feat = None
        if token_ids is not None:
            prompt_feat = self.prompt_position(self.text(token_ids, token_mask), femb)
        return frame_feat, prompt_feat


def encode_global_frames(encoder: GlobalContextEncoder, frames) -> torch.Tensor:
    """Token grid ``(n, K, d)`` for a ``FrameVolume`` (or ``(n, H, W, 3)`` array)."""
    data = frames.data if hasattr(frames, "data") and not torch.is_tensor(frames) else frames
    x = torch.as_tensor(np.asarray(data), dtype=torch.float32).permute(0, 3, 1, 2)[None]
    if x.shape[2] == 1:
        x = x.expand(-1, -1, 3, -1, -1)
    return encoder.encode_frames(x)[0]


def fuse_position(fusion: PositionFusion, tokens: torch.Tensor, femb: torch.Tensor) -> torch.Tensor:
    if femb.dim() == 1:
        femb = femb[None]
        return fusion(tokens[None], femb)[0]
    return fusion(tokens, femb)


def cross_attend_global(block: GlobalCrossAttention, mid, ctxfeat, ctx_mask=None):
    return block(mid, ctxfeat, ctx_mask)
