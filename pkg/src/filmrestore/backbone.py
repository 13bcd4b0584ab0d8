"""
Toy-scale network stack: latent autoencoder, preprocess module, base UNet
with temporal layers, and the restoration-guidance branch that injects
zero-initialised residuals into the frozen UNet.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, NumericalError
from .frequency import TextureReconstruction, pool_to
from .fusion import GlobalContextEncoder, GlobalCrossAttention
from .layers import (
    Downsample,
    FrameConv,
    KVCacheStore,
    ResBlock,
    SpatialSelfAttention,
    TemporalAttention,
    TimestepEmbedding,
    Upsample,
    fold,
    norm,
    unfold,
    zero_module,
)


@dataclass
class ModelConfig:
    image_channels: int = 3
    latent_channels: int = 4
    stride: int = 8
    ae_width: int = 32
    unet_width: int = 64
    unet_mult: tuple = (1, 2)
    heads: int = 4
    preprocess_width: int = 16
    pyramid_scales: int = 3
    cond_channels: int = 4
    fusion_dim: int = 64
    fourier_bands: int = 8
    global_size: int = 128
    global_patch: int = 16
    vocab_size: int = 4096
    max_caption: int = 64
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    use_prompt: bool = True
    use_frame: bool = True
    use_texture: bool = True

    def to_dict(self):
        d = asdict(self)
        d["unet_mult"] = list(self.unet_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "unet_mult" in d:
            d["unet_mult"] = tuple(d["unet_mult"])
        return cls(**d)


@dataclass
class LatentVolume:
    """Latent grid ``(n, h, w, c)`` with the spatial stride and the reflect padding added before encoding."""

    data: torch.Tensor
    stride: int = 8
    pad: tuple = (0, 0)

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class PreprocessOutput:
    features: torch.Tensor  # (B, n, cond_channels, h, w)
    rgb_pyramid: List[torch.Tensor]  # scale j: (B, n, 3, H / 2**j, W / 2**j)


@dataclass
class ConditionContext:
    """Everything the guidance branch needs besides the fused latent."""

    bbox: torch.Tensor  # (B, 4)
    frame_tokens: Optional[torch.Tensor] = None  # (B, n, K, d)
    prompt_tokens: Optional[torch.Tensor] = None  # (B, M, d)
    prompt_mask: Optional[torch.Tensor] = None  # (B, M)
    patch_latent: Optional[torch.Tensor] = None  # (B, n, c, h, w)
    global_latent: Optional[torch.Tensor] = None


# --------------------------------------------------------------------------
# autoencoder

class AutoEncoder(nn.Module):
    """Deterministic per-frame autoencoder with a tanh-bounded latent.

    No normalization layers: per-sample statistics would discard the absolute
    colour that flat regions of a frame are made of. ``latent_scale`` (set by
    :func:`calibrate_latent_scale`) rescales latents to unit variance so the
    diffusion noise does not drown the signal early in the schedule.
    """

    def __init__(self, in_ch: int = 3, latent_ch: int = 4, width: int = 32, stride: int = 8):
        super().__init__()
        levels = int(round(math.log2(stride)))
        if 2**levels != stride:
            raise ConfigurationError(f"stride must be a power of two, got {stride}")
        self.stride = stride
        self.in_ch = in_ch
        widths = [width * min(2**i, 2) for i in range(levels + 1)]
        enc = [nn.Conv2d(in_ch, widths[0], 3, padding=1)]
        for i in range(levels):
            enc += [ResBlock(widths[i], widths[i], normalize=False), Downsample(widths[i], widths[i + 1])]
        enc += [ResBlock(widths[-1], widths[-1], normalize=False), nn.SiLU(),
                nn.Conv2d(widths[-1], latent_ch, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(latent_ch, widths[-1], 3, padding=1), ResBlock(widths[-1], widths[-1], normalize=False)]
        for i in reversed(range(levels)):
            dec += [Upsample(widths[i + 1], widths[i]), ResBlock(widths[i], widths[i], normalize=False)]
        dec += [nn.SiLU(), nn.Conv2d(widths[0], in_ch, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    @property
    def bound(self) -> float:
        """Largest possible latent magnitude."""
        return float(self.latent_scale)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., 3, H, W)`` with H, W multiples of the stride -> ``(..., c, H/s, W/s)``."""
        lead = x.shape[:-3]
        z = torch.tanh(self.encoder(x.reshape(-1, *x.shape[-3:]))) * self.latent_scale
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-3]
        x = self.decoder(z.reshape(-1, *z.shape[-3:]) / self.latent_scale)
        return x.reshape(*lead, *x.shape[1:])


@torch.no_grad()
def calibrate_latent_scale(ae: AutoEncoder, frames: torch.Tensor, chunk: int = 64) -> float:
    """Set ``ae.latent_scale`` to ``1 / std`` of the unscaled latents of ``frames (N, 3, H, W)``."""
    ae.latent_scale.fill_(1.0)
    z = torch.cat([ae.encode(frames[i:i + chunk]) for i in range(0, len(frames), chunk)])
    std = float(z.std())
    if not math.isfinite(std) or std <= 0:
        raise NumericalError(f"cannot calibrate latent scale from std {std}")
    ae.latent_scale.fill_(1.0 / std)
    return 1.0 / std


def _pad_to_stride(x: torch.Tensor, stride: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        lead = x.shape[:-3]
        x = F.pad(x.reshape(-1, *x.shape[-3:]), (0, pw, 0, ph), mode=mode)
        x = x.reshape(*lead, *x.shape[-3:])
    return x, (ph, pw)


def encode_latent(ae: AutoEncoder, frames) -> LatentVolume:
    """Encode a ``FrameVolume`` to a ``LatentVolume`` (pads to a stride multiple)."""
    data = np.asarray(frames.data)
    if not np.all(np.isfinite(data)):
        raise InputError("non-finite input frames")
    x = torch.from_numpy(np.ascontiguousarray(data)).float().permute(0, 3, 1, 2)
    if x.shape[1] == 1:
        x = x.expand(-1, ae.in_ch, -1, -1)
    x, pad = _pad_to_stride(x, ae.stride)
    with torch.no_grad():
        z = ae.encode(x)
    return LatentVolume(z.permute(0, 2, 3, 1).contiguous(), stride=ae.stride, pad=pad)


def decode_latent(ae: AutoEncoder, z: LatentVolume, channels: int = 3):
    from .synthdata import FrameVolume

    with torch.no_grad():
        x = ae.decode(z.data.permute(0, 3, 1, 2).float())
    ph, pw = z.pad
    x = x[..., : x.shape[-2] - ph, : x.shape[-1] - pw].clamp(0.0, 1.0)
    arr = x.permute(0, 2, 3, 1).numpy()
    if channels == 1:
        arr = arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)[:, None]
    return FrameVolume(np.clip(arr, 0.0, 1.0))


# --------------------------------------------------------------------------
# preprocess module

class PreprocessModule(nn.Module):
    """Multi-scale spatio-temporal conv net on the degraded patch.

    The encoder squeezes the patch to a latent-resolution feature map (the
    conditioning features); the decoder grows RGB predictions back from that
    map, emitting one per pyramid scale.
    """

    def __init__(self, in_ch: int = 3, width: int = 16, feat_ch: int = 4, scales: int = 3, stride: int = 8):
        super().__init__()
        levels = int(round(math.log2(stride)))
        if not 1 <= scales <= levels + 1:
            raise ConfigurationError(f"pyramid scales must be in [1, {levels + 1}]")
        self.scales = scales
        widths = [width * min(2**i, 2) for i in range(levels + 1)]
        self.stem = nn.Conv3d(in_ch, widths[0], (1, 3, 3), padding=(0, 1, 1))
        self.down = nn.ModuleList(
            nn.Conv3d(widths[i], widths[i + 1], 3, stride=(1, 2, 2), padding=1) for i in range(levels)
        )
        self.bottleneck = nn.Conv3d(widths[-1], widths[-1], 3, padding=1)
        self.to_feat = nn.Conv3d(widths[-1], feat_ch, 1)
        self.from_feat = nn.Conv3d(feat_ch, widths[-1], 3, padding=1)
        self.up = nn.ModuleList(
            nn.Conv3d(widths[i + 1], widths[i], 3, padding=1) for i in reversed(range(levels))
        )
        # heads for the finest `scales` decoder outputs
        self.heads = nn.ModuleList(nn.Conv3d(widths[j], in_ch, (1, 3, 3), padding=(0, 1, 1)) for j in range(scales))

    def forward(self, x: torch.Tensor) -> PreprocessOutput:
        """``x (B, n, 3, H, W)``; H and W must be stride multiples."""
        h = x.transpose(1, 2)  # (B, C, n, H, W)
        h = F.silu(self.stem(h))
        for d in self.down:
            h = F.silu(d(h))
        h = h + F.silu(self.bottleneck(h))
        feat = self.to_feat(h)
        h = F.silu(self.from_feat(feat))
        level = len(self.up)
        outs = {level: self.heads[level](h)} if level < self.scales else {}
        for conv in self.up:
            h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
            h = F.silu(conv(h))
            level -= 1
            if level < self.scales:
                outs[level] = self.heads[level](h)
        pyramid = [outs[j].transpose(1, 2) for j in range(self.scales)]
        return PreprocessOutput(features=feat.transpose(1, 2), rgb_pyramid=pyramid)


def downsample_frames(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Area-average ``(B, n, C, H, W)`` by ``2**scale``; the resampler for pyramid targets."""
    if scale == 0:
        return x
    f = 2**scale
    b = x.shape[0]
    return unfold(F.avg_pool2d(fold(x), f), b)


def preprocess_forward(net: PreprocessModule, degraded_patch) -> PreprocessOutput:
    data = degraded_patch.data if hasattr(degraded_patch, "fps") else degraded_patch
    x = torch.as_tensor(np.asarray(data), dtype=torch.float32).permute(0, 3, 1, 2)[None]
    with torch.no_grad():
        return net(x)


# --------------------------------------------------------------------------
# base UNet

class UNet(nn.Module):
    """Two-resolution denoising UNet with temporal attention at every level.

    Guidance residuals are added to the skip connections feeding the decoder.
    """

    def __init__(self, in_ch: int = 4, width: int = 64, mult=(1, 2), heads: int = 4, num_timesteps: int = 1000):
        super().__init__()
        self.num_timesteps = num_timesteps
        w0, w1 = width * mult[0], width * mult[1]
        self.widths = (w0, w1)
        temb = 4 * width
        self.time_embed = TimestepEmbedding(width, temb)
        self.conv_in = FrameConv(in_ch, w0, 3, padding=1)
        self.enc0 = ResBlock(w0, w0, temb)
        self.tenc0 = TemporalAttention(w0, heads)
        self.down = Downsample(w0)
        self.enc1 = ResBlock(w0, w1, temb)
        self.tenc1 = TemporalAttention(w1, heads)
        self.mid = ResBlock(w1, w1, temb)
        self.dec1 = ResBlock(2 * w1, w1, temb)
        self.tdec1 = TemporalAttention(w1, heads)
        self.up = Upsample(w1)
        self.dec0 = ResBlock(w1 + w0, w0, temb)
        self.tdec0 = TemporalAttention(w0, heads)
        self.norm_out = norm(w0)
        self.conv_out = FrameConv(w0, in_ch, 3, padding=1)

    def check_timesteps(self, t: torch.Tensor):
        if (t < 0).any() or (t >= self.num_timesteps).any():
            raise InputError(f"timestep outside [0, {self.num_timesteps})")

    def forward(self, z: torch.Tensor, t: torch.Tensor, residuals: Optional[List[torch.Tensor]] = None):
        """``z (B, n, c, h, w)``, ``t (B,)`` -> predicted noise of the same shape."""
        self.check_timesteps(t)
        emb = self.time_embed(t)
        s0 = self.tenc0(self.enc0(self.conv_in(z), emb))
        s1 = self.tenc1(self.enc1(self.down(s0), emb))
        h = self.mid(s1, emb)
        if residuals is not None:
            if len(residuals) != 2 or residuals[0].shape != s0.shape or residuals[1].shape != s1.shape:
                raise ConfigurationError("guidance residual shapes do not match the UNet levels")
            s0 = s0 + residuals[0]
            s1 = s1 + residuals[1]
        h = self.tdec1(self.dec1(torch.cat([h, s1], dim=2), emb))
        h = self.up(h, size=s0.shape[-2:])
        h = self.tdec0(self.dec0(torch.cat([h, s0], dim=2), emb))
        b = h.shape[0]
        out = unfold(F.silu(self.norm_out(fold(h))), b)
        return self.conv_out(out)


# --------------------------------------------------------------------------
# restoration-guidance network

class GuidanceLevel(nn.Module):
    """self-attn -> global-prompt x-attn -> global-frame x-attn -> texture -> temporal."""

    def __init__(self, cin: int, cout: int, temb: int, cfg: ModelConfig, level: int):
        super().__init__()
        self.res = ResBlock(cin, cout, temb)
        self.self_attn = SpatialSelfAttention(cout, cfg.heads, layer_id=f"guidance.{level}")
        self.prompt_attn = GlobalCrossAttention(cout, cfg.fusion_dim, cfg.heads) if cfg.use_prompt else None
        self.frame_attn = GlobalCrossAttention(cout, cfg.fusion_dim, cfg.heads) if cfg.use_frame else None
        self.texture = TextureReconstruction(cout, cfg.latent_channels, cfg.heads) if cfg.use_texture else None
        self.temporal = TemporalAttention(cout, cfg.heads)
        self.zero_out = zero_module(FrameConv(cout, cout, 1))

    def forward(self, h, emb, ctx: ConditionContext, cache=None, timestep=None):
        h = self.res(h, emb)
        h = self.self_attn(h, cache, timestep)
        if self.prompt_attn is not None:
            h = self.prompt_attn(h, ctx.prompt_tokens, ctx.prompt_mask)
        if self.frame_attn is not None:
            h = self.frame_attn(h, ctx.frame_tokens)
        if self.texture is not None:
            size = h.shape[-2:]
            h = self.texture(h, pool_to(ctx.patch_latent, size), pool_to(ctx.global_latent, size))
        h = self.temporal(h)
        return h, self.zero_out(h)


class GuidanceNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.unet_width
        w0, w1 = width * cfg.unet_mult[0], width * cfg.unet_mult[1]
        temb = 4 * width
        self.fuse = nn.Linear(cfg.latent_channels + cfg.cond_channels, cfg.latent_channels)
        self.time_embed = TimestepEmbedding(width, temb)
        self.conv_in = FrameConv(cfg.latent_channels, w0, 3, padding=1)
        self.level0 = GuidanceLevel(w0, w0, temb, cfg, 0)
        self.down = Downsample(w0)
        self.level1 = GuidanceLevel(w0, w1, temb, cfg, 1)

    def fuse_noisy_and_condition(self, z_t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Channel-concatenate ``(B, n, c, h, w)`` grids and project back to ``c`` channels."""
        if z_t.shape[:2] != cond.shape[:2] or z_t.shape[-2:] != cond.shape[-2:]:
            raise ConfigurationError(f"latent {tuple(z_t.shape)} and condition {tuple(cond.shape)} grids differ")
        x = torch.cat([z_t, cond], dim=2).permute(0, 1, 3, 4, 2)
        return self.fuse(x).permute(0, 1, 4, 2, 3)

    def check_context(self, ctx: ConditionContext):
        need = []
        if self.cfg.use_prompt and (ctx.prompt_tokens is None or ctx.prompt_mask is None):
            need.append("prompt_tokens/prompt_mask")
        if self.cfg.use_frame and ctx.frame_tokens is None:
            need.append("frame_tokens")
        if self.cfg.use_texture and (ctx.patch_latent is None or ctx.global_latent is None):
            need.append("patch_latent/global_latent")
        if need:
            raise ConfigurationError(f"enabled fusion blocks are missing context: {', '.join(need)}")

    def forward(self, fused, ctx: ConditionContext, t, cache: Optional[KVCacheStore] = None, timestep=None):
        """Per-level residuals ``[r0 (B,n,w0,h,w), r1 (B,n,w1,h/2,w/2)]``."""
        self.check_context(ctx)
        emb = self.time_embed(t)
        h = self.conv_in(fused)
        h, r0 = self.level0(h, emb, ctx, cache, timestep)
        h, r1 = self.level1(self.down(h), emb, ctx, cache, timestep)
        return [r0, r1]

    @torch.no_grad()
    def copy_from_base(self, unet: UNet):
        """Initialise the shared-architecture parts from the base UNet encoder."""
        self.time_embed.load_state_dict(unet.time_embed.state_dict())
        self.conv_in.load_state_dict(unet.conv_in.state_dict())
        self.level0.res.load_state_dict(unet.enc0.state_dict())
        self.level0.temporal.load_state_dict(unet.tenc0.state_dict())
        self.down.load_state_dict(unet.down.state_dict())
        self.level1.res.load_state_dict(unet.enc1.state_dict())
        self.level1.temporal.load_state_dict(unet.tenc1.state_dict())


# --------------------------------------------------------------------------
# full model

def _resize_frames(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    b = x.shape[0]
    return unfold(F.interpolate(fold(x), size=size, mode="bilinear", align_corners=False, antialias=True), b)


class FilmRestorationModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.autoencoder = AutoEncoder(cfg.image_channels, cfg.latent_channels, cfg.ae_width, cfg.stride)
        self.unet = UNet(cfg.latent_channels, cfg.unet_width, cfg.unet_mult, cfg.heads, cfg.num_timesteps)
        self.preprocess = PreprocessModule(cfg.image_channels, cfg.preprocess_width, cfg.cond_channels,
                                           cfg.pyramid_scales, cfg.stride)
        self.guidance = GuidanceNetwork(cfg)
        self.context = GlobalContextEncoder(cfg.fusion_dim, cfg.fourier_bands, cfg.global_size, cfg.global_patch,
                                            cfg.vocab_size, cfg.max_caption, cfg.heads)

    def condition(self, degraded, global_frames, bbox, token_ids=None, token_mask=None):
        """Per-patch conditioning, independent of the timestep.

        ``degraded (B, n, 3, H, W)`` patch, ``global_frames (B, n, 3, Hf, Wf)``
        full frames of the same temporal window, ``bbox (B, 4)``.
        """
        cfg = self.cfg
        pre = self.preprocess(degraded)
        ctx = ConditionContext(bbox=bbox)
        if cfg.use_frame or cfg.use_prompt:
            frame_tokens, prompt_tokens = self.context(global_frames, bbox, token_ids, token_mask)
            ctx.frame_tokens = frame_tokens if cfg.use_frame else None
            if cfg.use_prompt:
                if token_ids is None:
                    raise ConfigurationError("prompt fusion enabled but no caption tokens given")
                ctx.prompt_tokens, ctx.prompt_mask = prompt_tokens, token_mask
        if cfg.use_texture:
            ctx.patch_latent = self.autoencoder.encode(degraded)
            ref = _resize_frames(global_frames, degraded.shape[-2:])
            ctx.global_latent = self.autoencoder.encode(ref)
        return pre, ctx

    def predict_noise(self, z_t, t, pre: PreprocessOutput, ctx: ConditionContext, cache=None, timestep=None,
                      use_guidance: bool = True):
        if not use_guidance:
            return self.unet(z_t, t)
        fused = self.guidance.fuse_noisy_and_condition(z_t, pre.features)
        residuals = self.guidance(fused, ctx, t, cache, timestep)
        return self.unet(z_t, t, residuals)


def unet_denoise(unet: UNet, z_t, t, residuals: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
    """Noise prediction for a single clip; ``z_t`` is a :class:`LatentVolume` or an ``(n, h, w, c)`` tensor."""
    data = z_t.data if isinstance(z_t, LatentVolume) else z_t
    x = data.permute(0, 3, 1, 2)[None]
    t = torch.as_tensor(t).reshape(-1)
    return unet(x, t, residuals)[0].permute(0, 2, 3, 1)


PARAMETER_GROUPS = ("autoencoder", "unet_base", "preprocess", "guidance", "fusion", "frequency")


def parameter_groups(model: FilmRestorationModel) -> dict:
    """Map each named parameter to one of ``PARAMETER_GROUPS``."""
    owner = {}
    for mname, module in model.named_modules():
        if isinstance(module, GlobalCrossAttention):
            tag = "fusion"
        elif isinstance(module, TextureReconstruction):
            tag = "frequency"
        else:
            continue
        for pname, _ in module.named_parameters():
            owner[f"{mname}.{pname}"] = tag
    groups = {g: [] for g in PARAMETER_GROUPS}
    prefix = {"autoencoder": "autoencoder", "unet": "unet_base", "preprocess": "preprocess",
              "guidance": "guidance", "context": "fusion"}
    for name, _ in model.named_parameters():
        tag = owner.get(name) or prefix[name.split(".", 1)[0]]
        groups[tag].append(name)
    return groups


def state_groups(model: FilmRestorationModel) -> dict:
    """Like :func:`parameter_groups` but also assigns buffers (e.g. the latent scale)."""
    groups = parameter_groups(model)
    prefix = {"autoencoder": "autoencoder", "unet": "unet_base", "preprocess": "preprocess",
              "guidance": "guidance", "context": "fusion"}
    for name, _ in model.named_buffers():
        groups[prefix[name.split(".", 1)[0]]].append(name)
    return groups


def temporal_parameters(model: nn.Module) -> list:
    """Names of every parameter that lives in a temporal-attention layer."""
    names = []
    for mname, module in model.named_modules():
        if isinstance(module, TemporalAttention):
            names += [f"{mname}.{p}" for p, _ in module.named_parameters()]
    return names
