"""Run configuration: line-oriented ``key = value`` files validated against a schema."""
from __future__ import annotations

from pathlib import Path

from .errors import ConfigurationError


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key: (parser, default)
SCHEMA = {
    # general
    "seed": (int, 0),
    "dataset_root": (str, "data"),
    "checkpoint_dir": (str, "checkpoints"),
    # synthetic data
    "num_clips": (int, 32),
    "frames": (int, 16),
    "height": (int, 64),
    "width": (int, 64),
    "min_frames": (int, 8),
    "defects_min": (int, 2),
    "defects_max": (int, 5),
    "rescale_min": (float, 0.5),
    "rescale_max": (float, 1.0),
    "quality_min": (int, 30),
    "quality_max": (int, 95),
    "grain_min": (float, 0.0),
    "grain_max": (float, 0.08),
    "mask_threshold": (float, 0.02),
    "caption": (str, ""),
    "source_dir": (str, ""),
    "template_dir": (str, ""),
    # patching
    "patch_frames": (int, 8),
    "patch_size": (int, 32),
    "overlap_frames": (int, 4),
    "overlap_pixels": (int, 16),
    # model
    "latent_channels": (int, 4),
    "stride": (int, 8),
    "ae_width": (int, 32),
    "unet_width": (int, 64),
    "preprocess_width": (int, 16),
    "fusion_dim": (int, 64),
    "fourier_bands": (int, 8),
    "global_size": (int, 128),
    "global_patch": (int, 16),
    "heads": (int, 4),
    "use_prompt": (_bool, True),
    "use_frame": (_bool, True),
    "use_texture": (_bool, True),
    # diffusion
    "T": (int, 1000),
    "beta_start": (float, 1e-4),
    "beta_end": (float, 2e-2),
    # training
    "stage": (int, 0),
    "lr": (float, 0.0),  # 0 selects the stage default
    "weight_decay": (float, 0.01),
    "batch": (int, 4),
    "steps": (int, 1000),
    "ae_steps": (int, 1000),
    "ae_batch": (int, 16),
    "ae_lr": (float, 1e-3),
    "ae_crop": (int, 0),  # 0 trains on full frames
    "alpha_p": (float, 1.0),
    "alpha_d": (float, 81.0),
    "defect_weighting": (str, "none"),  # "none" or "sqrt_abar": scale each sample's defect term by sqrt(abar_t)
    "grad_clip": (float, 1.0),
    "log_every": (int, 10),
    "ckpt_every": (int, 100),
    # inference
    "sampler_steps": (int, 20),
    "kv_cache": (_bool, True),
    "kv_capacity": (int, 2),
    "global_residual": (_bool, True),
}

DEFECT_WEIGHTINGS = ("none", "sqrt_abar")
STAGE_DEFAULT_LR = {0: 2e-4, 1: 1e-4, 2: 5e-5}


class RunConfig(dict):
    """Validated settings; keys are also readable as attributes."""

    def __init__(self, values=None, **overrides):
        super().__init__({k: default for k, (_, default) in SCHEMA.items()})
        self.update_checked(values or {})
        self.update_checked(overrides)

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    def update_checked(self, values) -> "RunConfig":
        for key, raw in values.items():
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
            parser = SCHEMA[key][0]
            try:
                self[key] = parser(raw) if raw is not None else SCHEMA[key][1]
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None
        self.validate()
        return self

    def validate(self):
        positive = ("frames", "height", "width", "patch_frames", "patch_size", "batch", "T", "sampler_steps",
                    "latent_channels", "stride", "unet_width", "ae_width", "fusion_dim", "heads", "log_every", "ckpt_every")
        for k in positive:
            if self[k] <= 0:
                raise ConfigurationError(f"{k} must be positive")
        if self["stage"] not in (0, 1, 2):
            raise ConfigurationError(f"stage must be 0, 1 or 2, got {self['stage']}")
        if self["overlap_pixels"] >= self["patch_size"] or self["overlap_frames"] >= self["patch_frames"]:
            raise ConfigurationError("overlaps must be smaller than the patch dims")
        if self["overlap_pixels"] < 0 or self["overlap_frames"] < 0:
            raise ConfigurationError("overlaps must be non-negative")
        if self["ae_crop"] < 0 or self["ae_crop"] % self["stride"]:
            raise ConfigurationError("ae_crop must be 0 or a positive multiple of the stride")
        if self["alpha_p"] < 0 or self["alpha_d"] < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self["defect_weighting"] not in DEFECT_WEIGHTINGS:
            raise ConfigurationError(f"defect_weighting must be one of {DEFECT_WEIGHTINGS}")
        if self["sampler_steps"] > self["T"]:
            raise ConfigurationError("sampler_steps cannot exceed T")

    def stage_lr(self, stage=None) -> float:
        stage = self["stage"] if stage is None else stage
        return self["lr"] if self["lr"] > 0 else STAGE_DEFAULT_LR[stage]

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file {p} not found")
        cfg.update_checked(parse_config_text(p.read_text()))
    if overrides:
        cfg.update_checked(overrides)
    return cfg
