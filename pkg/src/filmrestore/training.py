"""
Noise schedule, losses and the staged trainer.

Stages:
  0  autoencoder reconstruction, then the base UNet on clean latents
  1  preprocess module, multi-scale L1
  2  guidance branch (plus fusion and frequency blocks); autoencoder, base
     UNet, preprocess module and every temporal layer stay frozen
"""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (
    PARAMETER_GROUPS,
    FilmRestorationModel,
    ModelConfig,
    PreprocessOutput,
    calibrate_latent_scale,
    downsample_frames,
    parameter_groups,
    state_groups,
    temporal_parameters,
)
from .config import RunConfig
from .errors import ConfigurationError, InputError
from .fusion import tokenize_caption
from .synthdata import list_samples, read_sample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "filmrestore-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("step", "l_noise", "l_preprocess", "l_defect", "l_total")
PHASE_IDS = {"ae": 1, "unet": 2, "preprocess": 3, "guidance": 4}


# --------------------------------------------------------------------------
# diffusion schedule

class NoiseSchedule:
    """DDPM linear beta schedule with DDIM (eta = 0) stepping."""

    def __init__(self, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                 betas: Optional[Sequence[float]] = None):
        if betas is None:
            betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
            if not (0 < beta_start <= beta_end < 1):
                raise ConfigurationError("need 0 < beta_start <= beta_end < 1")
        self.betas = torch.as_tensor(betas, dtype=torch.float64)
        if (self.betas < 0).any() or (self.betas >= 1).any():
            raise ConfigurationError("betas must lie in [0, 1)")
        self.num_timesteps = len(self.betas)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)

    def _check(self, t):
        t = torch.as_tensor(t)
        if (t < 0).any() or (t >= self.num_timesteps).any():
            raise InputError(f"timestep outside [0, {self.num_timesteps})")
        return t

    def alpha_bar(self, t, like: torch.Tensor) -> torch.Tensor:
        """``abar_t`` broadcast against ``like`` (``t`` scalar or per-batch); t = -1 means 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        ab = torch.where(t >= 0, self.alphas_cumprod[t.clamp(min=0)], torch.ones((), dtype=torch.float64))
        ab = ab.to(like.dtype)
        return ab.reshape(ab.shape + (1,) * (like.dim() - ab.dim()))

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        self._check(t)
        if eps.shape != z0.shape:
            raise InputError("noise and latent shapes differ")
        ab = self.alpha_bar(t, z0)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps

    def predict_x0(self, z_t, t, eps, clip: Optional[float] = None):
        ab = self.alpha_bar(t, z_t)
        x0 = (z_t - (1 - ab).sqrt() * eps) / ab.sqrt()
        return x0.clamp(-clip, clip) if clip is not None else x0

    def sample_timesteps(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.randint(0, self.num_timesteps, (n,), generator=generator)

    def sampler_timesteps(self, steps: int) -> list:
        """Strided descending sub-schedule ending at the least-noisy stride, e.g. 999, 949, ..., 49."""
        stride = self.num_timesteps // steps
        return [int(i * stride + stride - 1) for i in reversed(range(steps))]

    def ddim_step(self, z_t, eps, t: int, t_prev: int, clip: Optional[float] = None):
        """Deterministic update from ``t`` to ``t_prev`` (``t_prev = -1`` lands on x0)."""
        x0 = self.predict_x0(z_t, t, eps, clip)
        if clip is not None:
            ab = self.alpha_bar(t, z_t)
            eps = (z_t - ab.sqrt() * x0) / (1 - ab).sqrt()
        ab_prev = self.alpha_bar(t_prev, z_t)
        return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps


def add_noise(schedule: NoiseSchedule, z0, t, eps):
    return schedule.add_noise(z0, t, eps)


# --------------------------------------------------------------------------
# losses

@dataclass
class LossWeights:
    alpha_p: float = 1.0
    alpha_d: float = 81.0

    def __post_init__(self):
        if self.alpha_p < 0 or self.alpha_d < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_noise: float
    l_preprocess: float
    l_defect: float
    l_total: float

    def row(self, step: int) -> list:
        return [step, self.l_noise, self.l_preprocess, self.l_defect, self.l_total]


def _t(x):
    if hasattr(x, "fps"):  # FrameVolume
        x = x.data
    return torch.as_tensor(np.asarray(x)) if not torch.is_tensor(x) else x


def loss_noise(eps, eps_pred):
    eps, eps_pred = _t(eps), _t(eps_pred)
    if eps.shape != eps_pred.shape:
        raise InputError("noise shapes differ")
    return ((eps - eps_pred) ** 2).mean()


def loss_preprocess(pyramid, gt, channels_last: bool = False, scales: Optional[int] = None):
    """Sum over scales of the frame-averaged per-pixel mean absolute error.

    ``pyramid`` is a ``PreprocessOutput`` or a list of per-scale predictions
    ``(B, n, C, H_j, W_j)``; ``gt`` is ``(B, n, C, H, W)``. With
    ``channels_last`` both use ``(..., H, W, C)`` layout instead.
    """
    preds = pyramid.rgb_pyramid if isinstance(pyramid, PreprocessOutput) else list(pyramid)
    if scales is not None:
        expected_pyramid_scales(preds, scales)
    gt = _t(gt)
    if channels_last:
        preds = [_t(p).movedim(-1, -3) for p in preds]
        gt = gt.movedim(-1, -3)
    if gt.dim() == 4:
        gt = gt[None]
        preds = [p[None] if p.dim() == 4 else p for p in preds]
    total = 0.0
    for j, p in enumerate(preds):
        target = downsample_frames(gt, j)
        if p.shape != target.shape:
            raise ConfigurationError(f"pyramid scale {j} has shape {tuple(p.shape)}, expected {tuple(target.shape)}")
        total = total + (p - target).abs().mean()
    return total


def expected_pyramid_scales(pyramid, scales: int):
    n = len(pyramid.rgb_pyramid if isinstance(pyramid, PreprocessOutput) else pyramid)
    if n != scales:
        raise ConfigurationError(f"pyramid has {n} scales, expected {scales}")


def loss_defect(pred, gt, mask, channels_last: bool = False):
    """Frame-averaged mean of ``|pred - gt| * mask``; masked-out pixels count as zeros.

    Layout ``(..., C, H, W)`` with mask ``(..., H, W)`` (or channels last).
    """
    pred, gt, mask = _t(pred), _t(gt), _t(mask)
    if not torch.isin(mask, torch.tensor([0, 1], dtype=mask.dtype)).all():
        raise InputError("defect mask must be binary")
    m = mask.to(pred.dtype)
    m = m[..., None] if channels_last else m[..., None, :, :]
    return ((pred - gt).abs() * m).mean()


def loss_total(parts, w: LossWeights = LossWeights()):
    """``l_noise + alpha_p * l_preprocess + alpha_d * l_defect``."""
    if isinstance(parts, LossReport):
        parts = (parts.l_noise, parts.l_preprocess, parts.l_defect)
    l_noise, l_pre, l_def = parts
    return l_noise + w.alpha_p * l_pre + w.alpha_d * l_def


# --------------------------------------------------------------------------
# data

class PatchSampler:
    """Holds a dataset in memory and draws random latent-aligned training patches."""

    def __init__(self, root, patch_frames: int, patch_size: int, stride: int = 8,
                 vocab_size: int = 4096, max_caption: int = 64):
        paths = list_samples(root)
        if not paths:
            raise ConfigurationError(f"no samples found under {root}")
        samples = [read_sample(p) for p in paths]
        shapes = {s.clean.shape for s in samples}
        if len(shapes) != 1:
            raise ConfigurationError(f"dataset clips differ in shape: {sorted(shapes)}")
        self.ids = [p.name for p in paths]
        to_t = lambda v: torch.from_numpy(v.data).permute(0, 3, 1, 2).contiguous()
        self.degraded = torch.stack([to_t(s.degraded) for s in samples])
        self.clean = torch.stack([to_t(s.clean) for s in samples])
        if self.clean.shape[2] == 1:
            self.degraded = self.degraded.expand(-1, -1, 3, -1, -1).contiguous()
            self.clean = self.clean.expand(-1, -1, 3, -1, -1).contiguous()
        self.mask = torch.stack([torch.from_numpy(s.mask) for s in samples])
        toks = [tokenize_caption(s.caption, vocab_size, max_caption) for s in samples]
        self.token_ids = torch.stack([t[0] for t in toks])
        self.token_mask = torch.stack([t[1] for t in toks])
        _, n, _, h, w = self.clean.shape
        self.pt, self.ps, self.stride = min(patch_frames, n), patch_size, stride
        if patch_size > min(h, w) or patch_size % stride:
            raise ConfigurationError(f"patch size {patch_size} must be a stride multiple no larger than {min(h, w)}")
        self.dims = (n, h, w)

    def __len__(self):
        return self.clean.shape[0]

    def batch(self, size: int, generator: torch.Generator) -> dict:
        n, h, w = self.dims
        idx = torch.randint(0, len(self), (size,), generator=generator)
        t0 = torch.randint(0, n - self.pt + 1, (size,), generator=generator)
        ys = torch.randint(0, (h - self.ps) // self.stride + 1, (size,), generator=generator) * self.stride
        xs = torch.randint(0, (w - self.ps) // self.stride + 1, (size,), generator=generator) * self.stride
        out = {k: [] for k in ("degraded", "clean", "mask", "global_frames", "bbox")}
        for i, t, y, x in zip(idx.tolist(), t0.tolist(), ys.tolist(), xs.tolist()):
            sl = (i, slice(t, t + self.pt))
            out["degraded"].append(self.degraded[sl][..., y:y + self.ps, x:x + self.ps])
            out["clean"].append(self.clean[sl][..., y:y + self.ps, x:x + self.ps])
            out["mask"].append(self.mask[sl][..., y:y + self.ps, x:x + self.ps])
            out["global_frames"].append(self.degraded[sl])
            out["bbox"].append(torch.tensor([x / w, y / h, (x + self.ps) / w, (y + self.ps) / h], dtype=torch.float32))
        batch = {k: torch.stack(v) for k, v in out.items()}
        batch["token_ids"] = self.token_ids[idx]
        batch["token_mask"] = self.token_mask[idx]
        return batch

    def frames(self, size: int, generator: torch.Generator, crop: Optional[int] = None) -> torch.Tensor:
        """Random single frames (clean or degraded, 50/50) for autoencoder training."""
        n, h, w = self.dims
        idx = torch.randint(0, len(self), (size,), generator=generator)
        fr = torch.randint(0, n, (size,), generator=generator)
        which = torch.rand(size, generator=generator) < 0.5
        out = torch.stack([(self.degraded if d else self.clean)[i, f] for i, f, d in zip(idx.tolist(), fr.tolist(), which.tolist())])
        if crop:
            y = int(torch.randint(0, h - crop + 1, (1,), generator=generator))
            x = int(torch.randint(0, w - crop + 1, (1,), generator=generator))
            out = out[..., y:y + crop, x:x + crop]
        return out


# --------------------------------------------------------------------------
# checkpoints

def model_config_from(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        latent_channels=cfg.latent_channels,
        stride=cfg.stride,
        ae_width=cfg.ae_width,
        unet_width=cfg.unet_width,
        preprocess_width=cfg.preprocess_width,
        cond_channels=cfg.latent_channels,
        fusion_dim=cfg.fusion_dim,
        fourier_bands=cfg.fourier_bands,
        global_size=cfg.global_size,
        global_patch=cfg.global_patch,
        heads=cfg.heads,
        num_timesteps=cfg.T,
        beta_start=cfg.beta_start,
        beta_end=cfg.beta_end,
        use_prompt=cfg.use_prompt,
        use_frame=cfg.use_frame,
        use_texture=cfg.use_texture,
    )


STAGE_TRAINABLE = {
    0: ("autoencoder", "unet_base"),
    1: ("preprocess",),
    2: ("guidance", "fusion", "frequency"),
}


def frozen_groups(stage: int) -> list:
    return [g for g in PARAMETER_GROUPS if g not in STAGE_TRAINABLE[stage]]


def save_checkpoint(path, model: FilmRestorationModel, stage: int, step: int, optimizer=None,
                    run_config: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    """Atomically write a versioned checkpoint with named parameter groups."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    groups = {g: {} for g in PARAMETER_GROUPS}
    for g, names in state_groups(model).items():
        for n in names:
            groups[g][n] = state[n].detach().clone()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": step,
        "model_config": model.cfg.to_dict(),
        "groups": groups,
        "manifest": {"frozen": {s: frozen_groups(s) for s in STAGE_TRAINABLE}, "trained_through": stage},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "run_config": dict(run_config or {}),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise ConfigurationError(f"cannot load checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a filmrestore checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_groups(model: FilmRestorationModel, payload: dict, groups: Sequence[str]) -> None:
    state = {}
    for g in groups:
        state.update(payload["groups"][g])
    missing = set(n for g in groups for n in parameter_groups(model)[g]) - set(state)
    if missing:
        raise ConfigurationError(f"checkpoint lacks parameters: {sorted(missing)[:3]}...")
    model.load_state_dict(state, strict=False)


def load_model(path) -> FilmRestorationModel:
    payload = read_checkpoint(path)
    model = FilmRestorationModel(ModelConfig.from_dict(payload["model_config"]))
    load_groups(model, payload, PARAMETER_GROUPS)
    model.eval()
    return model


# --------------------------------------------------------------------------
# trainer

def _grad_norm(model, names) -> float:
    params = dict(model.named_parameters())
    total = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            total += float(g.detach().pow(2).sum())
    return total ** 0.5


@dataclass
class TrainResult:
    checkpoint: Path
    history: list = field(default_factory=list)  # LossReport per step
    frozen_grad_norms: list = field(default_factory=list)  # stage 2: (temporal, base) per step
    seconds: float = 0.0


class Trainer:
    def __init__(self, cfg: RunConfig, sampler: Optional[PatchSampler] = None):
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.weights = LossWeights(cfg.alpha_p, cfg.alpha_d)
        self.ckpt_dir = Path(cfg.checkpoint_dir)
        self._sampler = sampler

    @property
    def sampler(self) -> PatchSampler:
        if self._sampler is None:
            self._sampler = PatchSampler(self.cfg.dataset_root, self.cfg.patch_frames, self.cfg.patch_size,
                                         stride=self.cfg.stride,
                                         vocab_size=4096, max_caption=64)
        return self._sampler

    def _generator(self, stage: int, step: int, phase: int = 0) -> torch.Generator:
        return torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + stage * 10_000_019 + phase * 7_919 + step)

    # ---- model assembly per stage

    def _build_model(self, stage: int) -> FilmRestorationModel:
        torch.manual_seed(self.cfg.seed)
        model = FilmRestorationModel(model_config_from(self.cfg))
        if stage == 2:
            for s in (0, 1):
                if not (self.ckpt_dir / f"stage{s}.pt").is_file():
                    raise ConfigurationError(f"stage 2 needs {self.ckpt_dir / f'stage{s}.pt'}")
        if stage >= 1 and (self.ckpt_dir / "stage0.pt").is_file():
            p0 = read_checkpoint(self.ckpt_dir / "stage0.pt")
            self._check_arch(model, p0)
            load_groups(model, p0, ("autoencoder", "unet_base"))
        if stage == 2:
            p1 = read_checkpoint(self.ckpt_dir / "stage1.pt")
            self._check_arch(model, p1)
            load_groups(model, p1, ("preprocess",))
            model.guidance.copy_from_base(model.unet)
        return model

    @staticmethod
    def _check_arch(model, payload):
        if payload["model_config"] != model.cfg.to_dict():
            raise ConfigurationError("checkpoint model config differs from the run config")

    def _freeze(self, model, trainable_groups, extra_frozen=()):
        groups = parameter_groups(model)
        trainable = set(n for g in trainable_groups for n in groups[g]) - set(extra_frozen)
        for n, p in model.named_parameters():
            p.requires_grad_(n in trainable)
        return [p for n, p in model.named_parameters() if n in trainable]

    def _optimizer(self, params, lr):
        return torch.optim.AdamW(params, lr=lr, weight_decay=self.cfg.weight_decay)

    # ---- stage steps

    def _ae_step(self, model, gen):
        frames = self.sampler.frames(self.cfg.ae_batch, gen, crop=self.cfg.ae_crop or None)
        rec = model.autoencoder.decode(model.autoencoder.encode(frames))
        return F.l1_loss(rec, frames) + F.mse_loss(rec, frames)

    def _unet_step(self, model, gen):
        batch = self.sampler.batch(self.cfg.batch, gen)
        with torch.no_grad():
            z0 = model.autoencoder.encode(batch["clean"])
        t = self.schedule.sample_timesteps(z0.shape[0], gen)
        eps = torch.randn(z0.shape, generator=gen)
        z_t = self.schedule.add_noise(z0, t, eps)
        l_noise = loss_noise(eps, model.unet(z_t, t))
        v = float(l_noise.detach())
        return l_noise, LossReport(v, 0.0, 0.0, v)

    def _preprocess_step(self, model, gen):
        batch = self.sampler.batch(self.cfg.batch, gen)
        pre = model.preprocess(batch["degraded"])
        l_pre = loss_preprocess(pre, batch["clean"])
        total = self.weights.alpha_p * l_pre
        return total, LossReport(0.0, float(l_pre.detach()), 0.0, float(total.detach()))

    def guidance_losses(self, model, batch, gen):
        """Full stage-2 objective on one batch; returns (total tensor, LossReport)."""
        with torch.no_grad():
            z0 = model.autoencoder.encode(batch["clean"])
            pre = model.preprocess(batch["degraded"])
            l_pre = loss_preprocess(pre, batch["clean"])
        ctx_pre, ctx = self._condition(model, batch, pre)
        t = self.schedule.sample_timesteps(z0.shape[0], gen)
        eps = torch.randn(z0.shape, generator=gen)
        z_t = self.schedule.add_noise(z0, t, eps)
        eps_pred = model.predict_noise(z_t, t, ctx_pre, ctx)
        l_noise = loss_noise(eps, eps_pred)
        z0_hat = self.schedule.predict_x0(z_t, t, eps_pred, clip=model.autoencoder.bound)
        pred = model.autoencoder.decode(z0_hat)
        if self.cfg.defect_weighting == "sqrt_abar":
            # the one-step x0 estimate amplifies noise-prediction error by 1/sqrt(abar_t)
            w = self.schedule.alpha_bar(t, z0).reshape(-1).sqrt()
            per = torch.stack([loss_defect(pred[i], batch["clean"][i], batch["mask"][i]) for i in range(len(w))])
            l_def = (w * per).mean()
        else:
            l_def = loss_defect(pred, batch["clean"], batch["mask"])
        total = loss_total((l_noise, l_pre, l_def), self.weights)
        return total, LossReport(*(float(v.detach()) for v in (l_noise, l_pre, l_def, total)))

    @staticmethod
    def _condition(model, batch, pre):
        cfg = model.cfg
        from .backbone import ConditionContext, _resize_frames

        ctx = ConditionContext(bbox=batch["bbox"])
        if cfg.use_frame or cfg.use_prompt:
            frame_tokens, prompt_tokens = model.context(batch["global_frames"], batch["bbox"],
                                                        batch["token_ids"], batch["token_mask"])
            if cfg.use_frame:
                ctx.frame_tokens = frame_tokens
            if cfg.use_prompt:
                ctx.prompt_tokens, ctx.prompt_mask = prompt_tokens, batch["token_mask"]
        if cfg.use_texture:
            with torch.no_grad():
                ctx.patch_latent = model.autoencoder.encode(batch["degraded"])
                ref = _resize_frames(batch["global_frames"], batch["degraded"].shape[-2:])
                ctx.global_latent = model.autoencoder.encode(ref)
        return pre, ctx

    # ---- driver

    def _run_phase(self, model, stage, phase, steps, step_fn, params, lr, log_path, resume_payload=None,
                   audit=None):
        opt = self._optimizer(params, lr)
        start = 0
        if resume_payload is not None and resume_payload.get("extra", {}).get("phase") == phase:
            opt.load_state_dict(resume_payload["optimizer"])
            start = resume_payload["step"]
        history, audits = [], []
        mode = "a" if start > 0 and log_path.exists() else "w"
        with open(log_path, mode, newline="") as fh:
            writer = csv.writer(fh)
            if mode == "w":
                writer.writerow(LOSS_COLUMNS if phase != "ae" else ("step", "l_recon"))
            for step in range(start, steps):
                gen = self._generator(stage, step, PHASE_IDS[phase])
                opt.zero_grad(set_to_none=True)
                out = step_fn(model, gen)
                loss, report = out if isinstance(out, tuple) else (out, None)
                loss.backward()
                if audit is not None:
                    audits.append(audit(model))
                if self.cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
                opt.step()
                if report is None:
                    report = LossReport(float(loss.detach()), 0.0, 0.0, float(loss.detach()))
                history.append(report)
                done = step + 1
                if done % self.cfg.log_every == 0 or done == steps:
                    writer.writerow(report.row(done) if phase != "ae" else [done, report.l_total])
                    fh.flush()
                    log.info("stage %d %s step %d/%d loss %.5f", stage, phase, done, steps, report.l_total)
                if done % self.cfg.ckpt_every == 0 and done < steps:
                    save_checkpoint(self.ckpt_dir / f"stage{stage}_latest.pt", model, stage, done, opt,
                                    self.cfg, extra={"phase": phase})
        return history, audits

    def train(self, stage: Optional[int] = None, resume: bool = False) -> TrainResult:
        stage = self.cfg.stage if stage is None else stage
        began = time.time()
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        model = self._build_model(stage)
        resume_payload = None
        if resume:
            latest = self.ckpt_dir / f"stage{stage}_latest.pt"
            resume_payload = read_checkpoint(latest)
            self._check_arch(model, resume_payload)
            load_groups(model, resume_payload, PARAMETER_GROUPS)
        model.train()
        lr = self.cfg.stage_lr(stage)
        result = TrainResult(checkpoint=self.ckpt_dir / f"stage{stage}.pt")

        if stage == 0:
            rp = resume_payload
            if rp is None or rp["extra"].get("phase") == "ae":
                params = self._freeze(model, ("autoencoder",))
                self._run_phase(model, 0, "ae", self.cfg.ae_steps, self._ae_step, params, self.cfg.ae_lr,
                                self.ckpt_dir / "stage0_autoencoder_loss.csv", rp)
                rp = None
                scale = calibrate_latent_scale(model.autoencoder, self.sampler.clean.flatten(0, 1))
                log.info("latent scale %.4f", scale)
            params = self._freeze(model, ("unet_base",))
            hist, _ = self._run_phase(model, 0, "unet", self.cfg.steps, self._unet_step, params, lr,
                                      self.ckpt_dir / "stage0_loss.csv", rp)
        elif stage == 1:
            params = self._freeze(model, ("preprocess",))
            hist, _ = self._run_phase(model, 1, "preprocess", self.cfg.steps, self._preprocess_step, params, lr,
                                      self.ckpt_dir / "stage1_loss.csv", resume_payload)
        else:
            temporal = temporal_parameters(model)
            base = parameter_groups(model)["unet_base"] + parameter_groups(model)["autoencoder"]
            params = self._freeze(model, STAGE_TRAINABLE[2], extra_frozen=temporal)
            audit = lambda m: (_grad_norm(m, temporal), _grad_norm(m, base))

            def step_fn(m, gen):
                return self.guidance_losses(m, self.sampler.batch(self.cfg.batch, gen), gen)

            hist, audits = self._run_phase(model, 2, "guidance", self.cfg.steps, step_fn, params, lr,
                                           self.ckpt_dir / "stage2_loss.csv", resume_payload, audit)
            result.frozen_grad_norms = audits
        result.history = hist
        for p in model.parameters():
            p.requires_grad_(True)
        save_checkpoint(result.checkpoint, model, stage, len(hist), None, self.cfg)
        result.seconds = time.time() - began
        return result


def train(stage: int, cfg: RunConfig, dataset=None, resume: bool = False) -> TrainResult:
    """Run one training stage; ``dataset`` may be a root path or a ``PatchSampler``."""
    sampler = dataset if isinstance(dataset, PatchSampler) else None
    if dataset is not None and sampler is None:
        cfg = RunConfig(cfg, dataset_root=str(dataset))
    return Trainer(cfg, sampler).train(stage, resume=resume)
