"""
Patch-consistent restoration of full-resolution clips.

A low-resolution pre-restoration of the whole frame is encoded once and,
renoised to each sampler level, blended into the running latent with a
cosine-decaying weight before the latent is tiled and denoised patch by patch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FilmRestorationModel
from .errors import AlignmentError, ConfigurationError, InputError
from .fusion import tokenize_caption
from .layers import KVCacheStore, SpatialSelfAttention
from .patchgrid import PatchGrid, assemble_patches, build_grid, extract_patch
from .synthdata import FrameVolume
from .training import NoiseSchedule

log = logging.getLogger(__name__)


def cosine_weight(t, T) -> float:
    """Global-residual weight ``0.25 * (1 + cos(pi * (T - t) / T))``: 0.5 at t=T, 0 at t=0."""
    if T <= 0 or t > T or t < 0:
        raise InputError(f"cosine weight needs 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return 0.25 * (1.0 + math.cos(math.pi * (T - t) / T))


def grfm_fuse(z_rs, z_gr, c_t):
    """``(1 - c_t) * z_rs + c_t * z_gr``."""
    if tuple(z_rs.shape) != tuple(z_gr.shape):
        raise AssertionError(f"cannot fuse latents of shapes {tuple(z_rs.shape)} and {tuple(z_gr.shape)}")
    return (1.0 - c_t) * z_rs + c_t * z_gr


def cached_self_attention(attn: SpatialSelfAttention, x_tokens, cache: Optional[KVCacheStore], timestep,
                          return_weights: bool = False):
    """Self-attention of ``x_tokens (G, L, C)`` over cached predecessor keys/values plus its own."""
    return attn.attend_tokens(x_tokens, cache, timestep, return_weights=return_weights)


@dataclass
class InferenceConfig:
    sampler_steps: int = 20
    patch_frames: int = 8
    patch_size: int = 32
    overlap_frames: int = 4
    overlap_pixels: int = 16
    kv_cache: bool = True
    kv_capacity: int = 2
    global_residual: bool = True
    use_guidance: bool = True
    seed: int = 0

    @classmethod
    def from_run_config(cls, cfg) -> "InferenceConfig":
        return cls(
            sampler_steps=cfg.sampler_steps,
            patch_frames=cfg.patch_frames,
            patch_size=cfg.patch_size,
            overlap_frames=cfg.overlap_frames,
            overlap_pixels=cfg.overlap_pixels,
            kv_cache=cfg.kv_cache,
            kv_capacity=cfg.kv_capacity,
            global_residual=cfg.global_residual,
            seed=cfg.seed,
        )


def tiled_apply(volume, grid: PatchGrid, fn: Callable, order=None):
    """Extract every patch, map it through ``fn(index, spec, patch)`` and reassemble."""
    order = range(len(grid.specs)) if order is None else order
    outs = {}
    for i in order:
        spec = grid.specs[i]
        outs[i] = fn(i, spec, extract_patch(volume, spec))
    return assemble_patches([outs[i] for i in range(len(grid.specs))], grid)


def run_sampler(z_init: torch.Tensor, schedule: NoiseSchedule, timesteps, grid: PatchGrid, denoise: Callable,
                z_gr0: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None,
                on_timestep: Optional[Callable] = None, on_step: Optional[Callable] = None) -> torch.Tensor:
    """Tiled sampling loop over latents laid out ``(n, h, w, c)``.

    ``denoise(i, spec, z_patch, t, t_prev)`` returns the patch at ``t_prev``.
    With ``z_gr0`` the clean global-residual latent is renoised to each level
    and blended in with :func:`cosine_weight` (horizon = the first timestep).
    """
    horizon = timesteps[0]
    z = z_init
    for k, t in enumerate(timesteps):
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else -1
        if on_timestep is not None:
            on_timestep(t)
        if z_gr0 is not None:
            noise = torch.randn(z_gr0.shape, generator=generator, dtype=z_gr0.dtype)
            z_gr_t = schedule.add_noise(z_gr0, t, noise)
            z = grfm_fuse(z, z_gr_t, cosine_weight(t, horizon))
        z = tiled_apply(z, grid, lambda i, spec, zp: denoise(i, spec, zp, t, t_prev))
        if on_step is not None:
            on_step(t, z)
    return z


def _to_tensor(vol: FrameVolume) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(vol.data)).permute(0, 3, 1, 2)
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x


def _to_volume(x: torch.Tensor, channels: int, fps: float) -> FrameVolume:
    arr = x.clamp(0, 1).permute(0, 2, 3, 1).numpy()
    if channels == 1:
        arr = arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)[:, None]
    return FrameVolume(np.clip(arr, 0.0, 1.0), fps=fps)


def _pad(x: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    if not (ph or pw):
        return x
    h, w = x.shape[-2:]
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class Restorer:
    def __init__(self, model: FilmRestorationModel, schedule: Optional[NoiseSchedule] = None,
                 cfg: InferenceConfig = InferenceConfig()):
        self.model = model.eval()
        self.schedule = schedule or NoiseSchedule(model.cfg.num_timesteps, model.cfg.beta_start, model.cfg.beta_end)
        self.cfg = cfg
        self.stride = model.cfg.stride
        if cfg.patch_size % self.stride or cfg.overlap_pixels % self.stride:
            raise ConfigurationError(
                f"patch size and overlap must be multiples of the latent stride {self.stride}")

    # ---- single-resolution sampler

    @torch.no_grad()
    def _sample(self, frames: torch.Tensor, caption: str, z_gr0: Optional[torch.Tensor], seed: int,
                on_step=None) -> torch.Tensor:
        """Restore ``frames (n, 3, H, W)`` whose H, W are stride multiples ≥ patch size; returns pixels."""
        cfg, model, s = self.cfg, self.model, self.stride
        n, _, h, w = frames.shape
        pt = min(cfg.patch_frames, n)
        ot = min(cfg.overlap_frames, pt - 1)
        grid = build_grid((n, h, w), (pt, cfg.patch_size, cfg.patch_size), (ot, cfg.overlap_pixels, cfg.overlap_pixels))
        try:
            lgrid = grid.scaled(s)
        except AlignmentError as exc:
            raise ConfigurationError(f"patch configuration incompatible with {h}x{w}: {exc}") from None

        gen = torch.Generator().manual_seed(seed)
        ids, tmask = tokenize_caption(caption, model.cfg.vocab_size, model.cfg.max_caption)
        contexts = []
        for spec in grid.specs:
            patch = frames[spec.t0:spec.t1, :, spec.y0:spec.y1, spec.x0:spec.x1][None]
            glob = frames[spec.t0:spec.t1][None]
            bbox = torch.tensor([spec.norm_bbox], dtype=torch.float32)
            contexts.append(model.condition(patch, glob, bbox, ids[None], tmask[None]))

        timesteps = self.schedule.sampler_timesteps(cfg.sampler_steps)
        z_lq = model.autoencoder.encode(frames).permute(0, 2, 3, 1)  # (n, h, w, c)
        z_init = self.schedule.add_noise(z_lq, timesteps[0], torch.randn(z_lq.shape, generator=gen))
        cache = KVCacheStore(cfg.kv_capacity) if cfg.kv_cache else None

        def denoise(i, spec, zp, t, t_prev):
            pre, ctx = contexts[i]
            if cache is not None:
                cache.begin_patch(i, (spec.t0, spec.t1))
            z = zp.permute(0, 3, 1, 2)[None]
            eps = model.predict_noise(z, torch.tensor([t]), pre, ctx, cache, t, use_guidance=cfg.use_guidance)
            out = self.schedule.ddim_step(z, eps, t, t_prev, clip=model.autoencoder.bound)
            return out[0].permute(0, 2, 3, 1)

        z0 = run_sampler(z_init, self.schedule, timesteps, lgrid, denoise, z_gr0=z_gr0, generator=gen,
                         on_timestep=cache.reset if cache is not None else None, on_step=on_step)
        return model.autoencoder.decode(z0.permute(0, 3, 1, 2)).clamp(0, 1)

    # ---- public API

    @torch.no_grad()
    def pre_restore_global(self, video: FrameVolume, caption: str = "") -> FrameVolume:
        """Downsample to fit one patch, reflect-pad, restore without spatial tiling, crop, upsample back."""
        x = _to_tensor(video)
        restored = self._pre_restore_tensor(x, caption)
        return _to_volume(restored, video.shape[-1], video.fps)

    def _pre_restore_tensor(self, x: torch.Tensor, caption: str, on_step=None) -> torch.Tensor:
        p = self.cfg.patch_size
        n, _, h, w = x.shape
        scale = min(p / h, p / w, 1.0)
        hs, ws = max(1, round(h * scale)), max(1, round(w * scale))
        small = x if (hs, ws) == (h, w) else F.interpolate(x, size=(hs, ws), mode="bilinear",
                                                           align_corners=False, antialias=True)
        padded = _pad(small, p - hs, p - ws)
        out = self._sample(padded, caption, None, self.cfg.seed + 1, on_step)[..., :hs, :ws]
        if (hs, ws) != (h, w):
            out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)
        return out

    @torch.no_grad()
    def restore_video(self, video: FrameVolume, caption: str = "", debug=None) -> FrameVolume:
        """Full pipeline; ``debug`` (a dict) receives the pre-restored frames and per-step latents."""
        cfg, s, p = self.cfg, self.stride, self.cfg.patch_size
        x = _to_tensor(video)
        n, _, h, w = x.shape
        hp, wp = max(p, h + (-h) % s), max(p, w + (-w) % s)
        xp = _pad(x, hp - h, wp - w)

        steps = [] if debug is not None else None
        record = (lambda t, z: steps.append((t, z.clone()))) if steps is not None else None

        if (hp, wp) == (p, p):
            # one spatial patch: the global residual would be this very restoration
            out = self._sample(xp, caption, None, cfg.seed + 1, record)
            pre = out
        else:
            z_gr0 = None
            pre = None
            if cfg.global_residual:
                pre = self._pre_restore_tensor(xp, caption)
                z_gr0 = self.model.autoencoder.encode(pre).permute(0, 2, 3, 1)
            out = self._sample(xp, caption, z_gr0, cfg.seed, record)
        if debug is not None:
            debug["pre_restored"] = None if pre is None else _to_volume(pre[..., :h, :w], video.shape[-1], video.fps)
            debug["steps"] = steps
        return _to_volume(out[..., :h, :w], video.shape[-1], video.fps)

    @torch.no_grad()
    def decode_preview(self, z: torch.Tensor, frame: int = 0) -> np.ndarray:
        img = self.model.autoencoder.decode(z[frame].permute(2, 0, 1)[None]).clamp(0, 1)[0]
        return img.permute(1, 2, 0).numpy()


def restore_video(video: FrameVolume, model: FilmRestorationModel, cfg: InferenceConfig = InferenceConfig(),
                  caption: str = "") -> FrameVolume:
    return Restorer(model, cfg=cfg).restore_video(video, caption)


def pre_restore_global(video: FrameVolume, model: FilmRestorationModel, cfg: InferenceConfig = InferenceConfig(),
                       caption: str = "") -> FrameVolume:
    return Restorer(model, cfg=cfg).pre_restore_global(video, caption)
