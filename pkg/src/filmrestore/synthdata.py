"""
Synthetic old-film data: quality degradation, procedural defect templates,
compositing, defect masks and the on-disk dataset layout.

Every random choice is drawn from ``numpy.random.Generator(PCG64)`` seeded by
the caller, so samples are reproducible across platforms.
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.fft import dctn, idctn

from .errors import ConfigurationError, CorruptDatasetError, InputError

DEFECT_KINDS = (
    "sparse_dust",
    "intensive_dust",
    "cigarette_burn",
    "flicker_scratch",
    "constant_scratch",
)
CAMERA_ANGLES = ("eye-level", "high-angle", "low-angle", "overhead", "dutch-angle")
SHOT_SIZES = ("close-up", "medium close-up", "medium", "long", "extreme long")
DEFAULT_MASK_THRESHOLD = 0.02

# IJG base quantisation tables
_LUMA_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_CHROMA_Q = np.full((8, 8), 99.0)
_CHROMA_Q[:4, :4] = np.array([
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
])


@dataclass
class FrameVolume:
    """A clip as a float32 array ``(N, H, W, C)`` with values in [0, 1]."""

    data: np.ndarray
    fps: float = 24.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise InputError(f"FrameVolume needs 4 dims (N,H,W,C), got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[3] not in (1, 3):
            raise InputError(f"bad FrameVolume shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InputError("FrameVolume contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise InputError("FrameVolume values must lie in [0, 1]")
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FrameVolume):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.data, other.data)


@dataclass
class DefectTemplate:
    alpha: np.ndarray  # (N, H, W) opacity in [0, 1]
    color: tuple
    kind: str

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise InputError(f"unknown defect kind {self.kind!r}")
        alpha = np.asarray(self.alpha, dtype=np.float32)
        if alpha.ndim != 3:
            raise InputError("template alpha must be (N, H, W)")
        self.alpha = np.clip(alpha, 0.0, 1.0)
        color = tuple(float(c) for c in self.color)
        if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
            raise InputError(f"template color must be an RGB triple in [0,1], got {self.color}")
        self.color = color

    def resized(self, n: int, h: int, w: int) -> "DefectTemplate":
        """Template resampled to ``(n, h, w)``: nearest in time, bilinear in space."""
        alpha = self.alpha
        if alpha.shape[0] != n:
            idx = np.minimum((np.arange(n) * alpha.shape[0]) // n, alpha.shape[0] - 1)
            alpha = alpha[idx]
        if alpha.shape[1:] != (h, w):
            t = torch.from_numpy(np.ascontiguousarray(alpha))[:, None]
            alpha = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[:, 0].numpy()
        return replace(self, alpha=alpha)

    def floored(self, threshold: float) -> "DefectTemplate":
        # opacity at or below the mask threshold is dropped so that unmasked
        # pixels are never touched by compositing
        return replace(self, alpha=np.where(self.alpha > threshold, self.alpha, 0.0))


@dataclass
class DefectSample:
    degraded: FrameVolume
    clean: FrameVolume
    mask: np.ndarray  # (N, H, W) uint8 in {0, 1}
    caption: str = ""
    shot_meta: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if not np.isin(mask, (0, 1)).all():
            raise InputError("defect mask must be {0,1}-valued")
        self.mask = mask.astype(np.uint8)
        n, h, w = self.clean.shape[:3]
        if self.degraded.shape != self.clean.shape or self.mask.shape != (n, h, w):
            raise InputError("degraded, clean and mask must share frame count and spatial dims")

    def __eq__(self, other):
        if not isinstance(other, DefectSample):
            return NotImplemented
        return (
            self.degraded == other.degraded
            and self.clean == other.clean
            and np.array_equal(self.mask, other.mask)
            and self.caption == other.caption
            and self.shot_meta == other.shot_meta
        )


@dataclass
class DegradeConfig:
    rescale: float = 1.0
    quality: Optional[int] = 95  # None disables compression
    grain: float = 0.0

    def validate(self):
        if not (0.0 < self.rescale <= 1.0):
            raise ConfigurationError(f"rescale factor must be in (0, 1], got {self.rescale}")
        if self.grain < 0:
            raise ConfigurationError(f"grain strength must be >= 0, got {self.grain}")
        if self.quality is not None and not (1 <= self.quality <= 100):
            raise ConfigurationError(f"compression quality must be in [1, 100], got {self.quality}")


@dataclass
class SynthConfig:
    min_frames: int = 8
    num_defects: tuple = (2, 5)
    kinds: tuple = DEFECT_KINDS
    rescale_range: tuple = (0.5, 1.0)
    quality_range: Optional[tuple] = (30, 95)
    grain_range: tuple = (0.0, 0.08)
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    caption: Optional[str] = None
    camera_angle: Optional[str] = None
    shot_size: Optional[str] = None
    template_pack: Optional[Sequence[DefectTemplate]] = None


# --------------------------------------------------------------------------
# quality degradation

def _resample_down_up(x: np.ndarray, r: float) -> np.ndarray:
    n, h, w, c = x.shape
    hd, wd = max(1, int(round(h * r))), max(1, int(round(w * r)))
    if (hd, wd) == (h, w):
        return x
    t = torch.from_numpy(np.ascontiguousarray(x)).permute(0, 3, 1, 2)
    t = F.interpolate(t, size=(hd, wd), mode="bilinear", align_corners=False, antialias=True)
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).numpy()


def _quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((base * scale + 50.0) / 100.0), 1.0)


def _dct_roundtrip(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """8x8 block DCT quantisation of a stack of planes ``(N, H, W)`` in [0,255]."""
    n, h, w = plane.shape
    ph, pw = (-h) % 8, (-w) % 8
    p = np.pad(plane, ((0, 0), (0, ph), (0, pw)), mode="edge") - 128.0
    hb, wb = p.shape[1] // 8, p.shape[2] // 8
    blocks = p.reshape(n, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(n, hb * 8, wb * 8) + 128.0
    return rec[:, :h, :w]


def _jpeg_like(x: np.ndarray, quality: int) -> np.ndarray:
    x255 = x.astype(np.float64) * 255.0
    lq, cq = _quant_table(_LUMA_Q, quality), _quant_table(_CHROMA_Q, quality)
    if x.shape[-1] == 1:
        return (_dct_roundtrip(x255[..., 0], lq)[..., None] / 255.0).astype(np.float32)
    r, g, b = x255[..., 0], x255[..., 1], x255[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    y, cb, cr = _dct_roundtrip(y, lq), _dct_roundtrip(cb, cq), _dct_roundtrip(cr, cq)
    cb, cr = cb - 128.0, cr - 128.0
    out = np.stack([
        y + 1.402 * cr,
        y - 0.344136 * cb - 0.714136 * cr,
        y + 1.772 * cb,
    ], axis=-1)
    return (out / 255.0).astype(np.float32)


def degrade_quality(clip: FrameVolume, cfg: DegradeConfig, seed: int = 0) -> FrameVolume:
    """Rescale down-then-up, DCT-quantise, add Gaussian grain; clamp to [0,1]."""
    cfg.validate()
    x = clip.data
    if cfg.rescale < 1.0:
        x = _resample_down_up(x, cfg.rescale)
    if cfg.quality is not None:
        x = _jpeg_like(np.clip(x, 0.0, 1.0), cfg.quality)
    if cfg.grain > 0:
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, cfg.grain, size=x.shape).astype(np.float32)
    return FrameVolume(np.clip(x, 0.0, 1.0).astype(np.float32), fps=clip.fps)


# --------------------------------------------------------------------------
# defect templates

def _disk(alpha: np.ndarray, cy: float, cx: float, ry: float, rx: float, opacity: float):
    h, w = alpha.shape
    y0, y1 = max(0, int(cy - ry - 2)), min(h, int(cy + ry + 3))
    x0, x1 = max(0, int(cx - rx - 2)), min(w, int(cx + rx + 3))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float32)
    d = np.sqrt(((yy - cy) / max(ry, 1e-3)) ** 2 + ((xx - cx) / max(rx, 1e-3)) ** 2)
    # soft edge about one pixel wide
    edge = np.clip((1.0 - d) * min(ry, rx) + 0.5, 0.0, 1.0) * opacity
    np.maximum(alpha[y0:y1, x0:x1], edge, out=alpha[y0:y1, x0:x1])


def _vertical_line(alpha: np.ndarray, xs: np.ndarray, width: float, opacity: float):
    h, w = alpha.shape
    xx = np.arange(w, dtype=np.float32)[None, :]
    d = np.abs(xx - xs[:, None])
    line = np.clip(width / 2.0 - d + 0.5, 0.0, 1.0) * opacity
    np.maximum(alpha, line, out=alpha)


def _random_color(rng: np.random.Generator) -> tuple:
    mode = rng.integers(3)
    if mode == 0:
        return tuple(rng.uniform(0.0, 0.12, size=3))
    if mode == 1:
        return tuple(rng.uniform(0.88, 1.0, size=3))
    base = rng.uniform(0.0, 1.0, size=3)
    return tuple(base)


def make_template(kind: str, n: int, h: int, w: int, rng: np.random.Generator,
                  color: Optional[tuple] = None) -> DefectTemplate:
    """Procedurally generate one defect template of the given kind."""
    alpha = np.zeros((n, h, w), dtype=np.float32)
    scale = min(h, w) / 64.0
    if kind in ("sparse_dust", "intensive_dust"):
        lam = 3 if kind == "sparse_dust" else 18
        rmax = 2.2 if kind == "sparse_dust" else 1.4
        for i in range(n):
            for _ in range(rng.poisson(lam)):
                r = rng.uniform(0.6, rmax) * scale
                _disk(alpha[i], rng.uniform(0, h), rng.uniform(0, w),
                      r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.0))
    elif kind == "cigarette_burn":
        length = int(rng.integers(1, min(3, n) + 1))
        start = int(rng.integers(0, n - length + 1))
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        r = rng.uniform(0.06, 0.12) * min(h, w)
        for i in range(start, start + length):
            _disk(alpha[i], cy, cx, r * rng.uniform(0.9, 1.1), r * rng.uniform(0.9, 1.1), 1.0)
    elif kind in ("flicker_scratch", "constant_scratch"):
        x = rng.uniform(0.05, 0.95) * w
        width = rng.uniform(1.0, 2.0) * max(scale, 0.5)
        opacity = rng.uniform(0.6, 1.0)
        for i in range(n):
            if kind == "flicker_scratch":
                x = float(np.clip(x + rng.normal(0, 1.5 * scale), 0, w - 1))
                if rng.uniform() < 0.35:
                    continue
                op = opacity * rng.uniform(0.4, 1.0)
            else:
                op = opacity
            drift = np.cumsum(rng.normal(0.0, 0.08, size=h)).astype(np.float32)
            _vertical_line(alpha[i], x + drift, width, op)
    else:
        raise InputError(f"unknown defect kind {kind!r}")
    return DefectTemplate(alpha, color if color is not None else _random_color(rng), kind)


def load_template_pack(directory) -> list:
    """Read user-supplied alpha images ``<kind>*.png`` as single-frame templates."""
    out = []
    for path in sorted(Path(directory).glob("*.png")):
        kind = next((k for k in DEFECT_KINDS if path.stem.startswith(k)), None)
        if kind is None:
            continue
        alpha = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
        out.append(DefectTemplate(alpha[None], (0.0, 0.0, 0.0), kind))
    return out


# --------------------------------------------------------------------------
# compositing and masks

def _max_alpha(templates, shape):
    a = np.zeros(shape, dtype=np.float32)
    for t in templates:
        np.maximum(a, t.alpha, out=a)
    return a


def colorize_and_composite(clip: FrameVolume, templates: Sequence[DefectTemplate]) -> FrameVolume:
    """Blend coloured defects over the clip: ``(1 - a) * clip + a * color``.

    ``a`` is the per-pixel maximum alpha over templates; the colour comes from
    the template owning that maximum.
    """
    n, h, w, c = clip.shape
    if not templates:
        return FrameVolume(clip.data.copy(), fps=clip.fps)
    templates = [t.resized(n, h, w) for t in templates]
    alphas = np.stack([t.alpha for t in templates])
    if alphas.shape[1:] != (n, h, w):
        raise AssertionError("template resize produced mismatched dims")
    colors = np.array([t.color for t in templates], dtype=np.float32)
    if c == 1:
        colors = (colors @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[:, None]
    owner = alphas.argmax(axis=0)
    a = np.take_along_axis(alphas, owner[None], axis=0)[0][..., None]
    color = colors[owner]
    out = (1.0 - a) * clip.data + a * color
    return FrameVolume(np.clip(out, 0.0, 1.0), fps=clip.fps)


def compute_defect_mask(templates: Sequence[DefectTemplate], threshold: float = DEFAULT_MASK_THRESHOLD,
                        shape: Optional[tuple] = None) -> np.ndarray:
    """Binary mask, 1 where the max template alpha is strictly above ``threshold``."""
    if not (0.0 < threshold < 1.0):
        raise ConfigurationError(f"mask threshold must be in (0,1), got {threshold}")
    if not templates:
        if shape is None:
            raise InputError("shape is required when no templates are given")
        return np.zeros(shape, dtype=np.uint8)
    if shape is not None:
        templates = [t.resized(*shape) for t in templates]
    a = _max_alpha(templates, templates[0].alpha.shape)
    return (a > threshold).astype(np.uint8)


# --------------------------------------------------------------------------
# full sample synthesis

def stub_caption(shot_size: str, camera_angle: str) -> str:
    return f"{shot_size} {camera_angle} shot of a film scene"


def synthesize_sample(clean: FrameVolume, rng_seed: int, cfg: SynthConfig = SynthConfig()) -> DefectSample:
    if clean.num_frames < cfg.min_frames:
        raise InputError(f"clip has {clean.num_frames} frames, need at least {cfg.min_frames}")
    n, h, w, _ = clean.shape
    rng = np.random.default_rng(rng_seed)

    dcfg = DegradeConfig(
        rescale=float(rng.uniform(*cfg.rescale_range)),
        quality=None if cfg.quality_range is None else int(rng.integers(cfg.quality_range[0], cfg.quality_range[1] + 1)),
        grain=float(rng.uniform(*cfg.grain_range)),
    )
    base = degrade_quality(clean, dcfg, seed=int(rng.integers(2**31)))

    k = int(rng.integers(cfg.num_defects[0], cfg.num_defects[1] + 1))
    templates = []
    for _ in range(k):
        if cfg.template_pack:
            t = cfg.template_pack[int(rng.integers(len(cfg.template_pack)))]
            t = replace(t, color=_random_color(rng))
        else:
            t = make_template(cfg.kinds[int(rng.integers(len(cfg.kinds)))], n, h, w, rng)
        templates.append(t.resized(n, h, w).floored(cfg.mask_threshold))

    degraded = colorize_and_composite(base, templates)
    mask = compute_defect_mask(templates, cfg.mask_threshold, shape=(n, h, w))

    camera = cfg.camera_angle or CAMERA_ANGLES[int(rng.integers(len(CAMERA_ANGLES)))]
    shot = cfg.shot_size or SHOT_SIZES[int(rng.integers(len(SHOT_SIZES)))]
    caption = cfg.caption if cfg.caption is not None else stub_caption(shot, camera)
    return DefectSample(
        degraded=degraded,
        clean=FrameVolume(clean.data.copy(), fps=clean.fps),
        mask=mask,
        caption=caption,
        shot_meta={"camera_angle": camera, "shot_size": shot},
        seed=rng_seed,
    )


def procedural_clip(seed: int, frames: int = 16, height: int = 64, width: int = 64,
                    channels: int = 3) -> FrameVolume:
    """A smooth synthetic "flawless" clip: a drifting gradient, soft moving blobs and low-frequency texture."""
    rng = np.random.default_rng(seed)
    t = np.arange(frames, dtype=np.float32)[:, None, None]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    yy, xx = yy[None] / height, xx[None] / width

    out = np.empty((frames, height, width, channels), dtype=np.float32)
    base = rng.uniform(0.3, 0.7, size=channels)
    grad = rng.uniform(-0.2, 0.2, size=(channels, 2))
    theta = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(1.0, 3.0)
    speed = rng.uniform(-0.05, 0.05, size=2)
    tex = 0.05 * np.sin(2 * np.pi * freq * (np.cos(theta) * (xx - speed[0] * t) + np.sin(theta) * (yy - speed[1] * t)))
    for ch in range(channels):
        out[..., ch] = base[ch] + grad[ch, 0] * (yy - 0.5) + grad[ch, 1] * (xx - 0.5) + tex

    for _ in range(int(rng.integers(2, 4))):
        c0 = rng.uniform(0.2, 0.8, size=2)
        v = rng.uniform(-0.015, 0.015, size=2)
        sigma = rng.uniform(0.08, 0.16)
        amp = rng.uniform(-0.3, 0.3, size=channels)
        cy, cx = c0[0] + v[0] * t, c0[1] + v[1] * t
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        out += g[..., None] * amp
    return FrameVolume(np.clip(out, 0.05, 0.95), fps=24.0)


# --------------------------------------------------------------------------
# on-disk layout: <root>/<sample_id>/{degraded/,clean/,mask/,manifest.txt}

def _write_frames(vol: FrameVolume, d: Path):
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(vol.data):
        arr = np.round(frame * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[..., 0], "L") if arr.shape[-1] == 1 else Image.fromarray(arr, "RGB")
        img.save(d / f"{i:06d}.png")


def read_frames(d, fps: float = 24.0) -> FrameVolume:
    files = sorted(Path(d).glob("*.png"))
    if not files:
        raise CorruptDatasetError(f"no frames in {d}")
    frames = []
    for f in files:
        arr = np.asarray(Image.open(f))
        if arr.ndim == 2:
            arr = arr[..., None]
        frames.append(arr[..., :3])
    return FrameVolume(np.stack(frames).astype(np.float32) / 255.0, fps=fps)


def write_frames(vol: FrameVolume, d) -> None:
    _write_frames(vol, Path(d))


def parse_manifest(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise CorruptDatasetError(f"malformed manifest line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def write_sample(sample: DefectSample, directory) -> None:
    d = Path(directory)
    _write_frames(sample.degraded, d / "degraded")
    _write_frames(sample.clean, d / "clean")
    (d / "mask").mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(sample.mask):
        Image.fromarray(m.astype(bool)).convert("1").save(d / "mask" / f"{i:06d}.png")
    meta = {
        "caption": sample.caption.replace("\n", " "),
        "fps": repr(float(sample.clean.fps)),
        "camera_angle": sample.shot_meta.get("camera_angle", ""),
        "shot_size": sample.shot_meta.get("shot_size", ""),
        "seed": "" if sample.seed is None else str(sample.seed),
        "frames": str(sample.clean.num_frames),
    }
    tmp = d / "manifest.txt.tmp"
    tmp.write_text("".join(f"{k}: {v}\n" for k, v in meta.items()))
    os.replace(tmp, d / "manifest.txt")


def read_sample(directory) -> DefectSample:
    d = Path(directory)
    if not (d / "manifest.txt").is_file():
        raise CorruptDatasetError(f"missing manifest in {d}")
    meta = parse_manifest(d / "manifest.txt")
    fps = float(meta.get("fps", 24.0))
    counts = {sub: len(list((d / sub).glob("*.png"))) for sub in ("degraded", "clean", "mask")}
    if len(set(counts.values())) != 1 or counts["clean"] == 0:
        raise CorruptDatasetError(f"frame-count mismatch in {d}: {counts}")
    if "frames" in meta and int(meta["frames"]) != counts["clean"]:
        raise CorruptDatasetError(f"manifest says {meta['frames']} frames, found {counts['clean']}")
    degraded = read_frames(d / "degraded", fps)
    clean = read_frames(d / "clean", fps)
    mask = np.stack([np.asarray(Image.open(f).convert("L")) > 0 for f in sorted((d / "mask").glob("*.png"))])
    seed = meta.get("seed", "")
    return DefectSample(
        degraded=degraded,
        clean=clean,
        mask=mask.astype(np.uint8),
        caption=meta.get("caption", ""),
        shot_meta={"camera_angle": meta.get("camera_angle", ""), "shot_size": meta.get("shot_size", "")},
        seed=int(seed) if seed else None,
    )


def list_samples(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise CorruptDatasetError(f"dataset root {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.txt").exists())


def synthesize_dataset(root, num_clips: int, seed: int, cfg: SynthConfig = SynthConfig(),
                       frames: int = 16, height: int = 64, width: int = 64, sources=None) -> list:
    """Write ``num_clips`` samples under ``root``; clean clips are procedural unless ``sources`` is given."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(num_clips):
        clip_seed = zlib.crc32(f"{seed}:{i}".encode())
        if sources:
            clean = sources[i % len(sources)]
        else:
            clean = procedural_clip(clip_seed, frames, height, width)
        sample = synthesize_sample(clean, clip_seed, cfg)
        sid = f"{i:06d}"
        write_sample(sample, root / sid)
        ids.append(sid)
    return ids
