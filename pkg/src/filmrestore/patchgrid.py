"""Overlapped 3D patch grids: construction, extraction and feathered reassembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import AlignmentError, AssemblyError, ConfigurationError


@dataclass(frozen=True)
class PatchSpec:
    t0: int
    t1: int
    y0: int
    y1: int
    x0: int
    x1: int
    norm_bbox: tuple = (0.0, 0.0, 1.0, 1.0)

    @property
    def shape(self):
        return (self.t1 - self.t0, self.y1 - self.y0, self.x1 - self.x0)

    def scaled(self, stride: int) -> "PatchSpec":
        """Spatial coordinates divided by ``stride`` (frames untouched)."""
        coords = (self.y0, self.y1, self.x0, self.x1)
        if any(c % stride for c in coords):
            raise AlignmentError(f"patch {coords} not aligned to latent stride {stride}")
        y0, y1, x0, x1 = (c // stride for c in coords)
        return PatchSpec(self.t0, self.t1, y0, y1, x0, x1, self.norm_bbox)


@dataclass(frozen=True)
class PatchGrid:
    specs: tuple
    patch: tuple
    overlap: tuple
    frame_dims: tuple
    starts: tuple  # per-axis start lists (t, y, x)

    def __len__(self):
        return len(self.specs)

    def scaled(self, stride: int) -> "PatchGrid":
        n, h, w = self.frame_dims
        if h % stride or w % stride:
            raise AlignmentError(f"frame dims {(h, w)} not divisible by stride {stride}")
        specs = tuple(s.scaled(stride) for s in self.specs)
        st, sy, sx = self.starts
        for v in (*sy, *sx, self.patch[1], self.patch[2]):
            if v % stride:
                raise AlignmentError(f"grid coordinate {v} not divisible by stride {stride}")
        return PatchGrid(
            specs=specs,
            patch=(self.patch[0], self.patch[1] // stride, self.patch[2] // stride),
            overlap=(self.overlap[0], self.overlap[1] // stride, self.overlap[2] // stride),
            frame_dims=(n, h // stride, w // stride),
            starts=(st, tuple(s // stride for s in sy), tuple(s // stride for s in sx)),
        )

    def weights(self, index: int) -> np.ndarray:
        """Separable feather weights ``(pt, ph, pw)`` for patch ``index``."""
        spec = self.specs[index]
        starts = (spec.t0, spec.y0, spec.x0)
        ramps = [_feather_ramp(s, p, axis_starts)
                 for s, p, axis_starts in zip(starts, self.patch, self.starts)]
        return ramps[0][:, None, None] * ramps[1][None, :, None] * ramps[2][None, None, :]


def axis_starts(size: int, patch: int, overlap: int) -> list:
    stride = patch - overlap
    starts = list(range(0, size - patch, stride))
    starts.append(size - patch)
    return sorted(set(starts))


def _feather_ramp(start: int, p: int, starts: Sequence[int]) -> np.ndarray:
    """1 in the interior, linear decay towards an edge across the band shared with a neighbour."""
    i = starts.index(start)
    left = starts[i - 1] + p - start if i > 0 else 0
    right = start + p - starts[i + 1] if i + 1 < len(starts) else 0
    k = np.arange(p, dtype=np.float64)
    w = np.ones(p)
    if left > 0:
        w = np.minimum(w, (k + 1) / (left + 1))
    if right > 0:
        w = np.minimum(w, (p - k) / (right + 1))
    return w


def normalize_bbox(spec: PatchSpec, dims) -> tuple:
    _, h, w = dims[-3:] if len(dims) >= 3 else (None, *dims)
    return (spec.x0 / w, spec.y0 / h, spec.x1 / w, spec.y1 / h)


def build_grid(dims, patch, overlap) -> PatchGrid:
    """Raster-ordered (temporal-major, then rows, then columns) overlapped patch grid.

    The last patch along each axis is clamped flush to the border.
    """
    n, h, w = (int(v) for v in dims)
    pt, ph, pw = (int(v) for v in patch)
    ot, oy, ox = (int(v) for v in overlap)
    for size, p, o, name in ((n, pt, ot, "frames"), (h, ph, oy, "height"), (w, pw, ox, "width")):
        if p < 1 or p > size:
            raise ConfigurationError(f"patch {name} {p} does not fit frame {name} {size}")
        if not (0 <= o < p):
            raise ConfigurationError(f"overlap {name} {o} must be in [0, {p})")
    st, sy, sx = axis_starts(n, pt, ot), axis_starts(h, ph, oy), axis_starts(w, pw, ox)
    specs = []
    for t0 in st:
        for y0 in sy:
            for x0 in sx:
                s = PatchSpec(t0, t0 + pt, y0, y0 + ph, x0, x0 + pw)
                specs.append(PatchSpec(s.t0, s.t1, s.y0, s.y1, s.x0, s.x1, normalize_bbox(s, (n, h, w))))
    return PatchGrid(tuple(specs), (pt, ph, pw), (ot, oy, ox), (n, h, w), (tuple(st), tuple(sy), tuple(sx)))


def _unwrap(vol):
    from .synthdata import FrameVolume
    from .backbone import LatentVolume

    if isinstance(vol, FrameVolume):
        return vol.data, lambda d: FrameVolume(d, fps=vol.fps), 1
    if isinstance(vol, LatentVolume):
        return vol.data, lambda d: LatentVolume(d, stride=vol.stride), vol.stride
    return vol, lambda d: d, 1


def extract_patch(vol, spec: PatchSpec, stride: int | None = None):
    """Copy of the sub-volume under ``spec``; arrays are laid out ``(N, H, W, ...)``.

    For a ``LatentVolume`` (or an explicit ``stride``) pixel coordinates are
    divided by the latent stride first.
    """
    data, wrap, default_stride = _unwrap(vol)
    stride = default_stride if stride is None else stride
    s = spec.scaled(stride) if stride != 1 else spec
    n, h, w = data.shape[:3]
    if not (0 <= s.t0 < s.t1 <= n and 0 <= s.y0 < s.y1 <= h and 0 <= s.x0 < s.x1 <= w):
        raise ConfigurationError(f"patch {s} outside volume {data.shape[:3]}")
    sub = data[s.t0:s.t1, s.y0:s.y1, s.x0:s.x1]
    sub = sub.clone() if isinstance(sub, torch.Tensor) else np.array(sub, copy=True)
    return wrap(sub)


def assemble_patches(patches: Sequence, grid: PatchGrid):
    """Weighted average of patches with feathered partition-of-unity weights."""
    if len(patches) != len(grid.specs):
        raise AssemblyError(f"expected {len(grid.specs)} patches, got {len(patches)}")
    datas = []
    wrap = None
    for p in patches:
        d, wrap, _ = _unwrap(p)
        datas.append(d)
    is_torch = isinstance(datas[0], torch.Tensor)
    trailing = tuple(datas[0].shape[3:])
    n, h, w = grid.frame_dims
    if is_torch:
        dev, dt = datas[0].device, datas[0].dtype
        acc = torch.zeros((n, h, w) + trailing, dtype=torch.float64, device=dev)
        wsum = torch.zeros((n, h, w), dtype=torch.float64, device=dev)
    else:
        dt = datas[0].dtype
        acc = np.zeros((n, h, w) + trailing, dtype=np.float64)
        wsum = np.zeros((n, h, w), dtype=np.float64)
    for i, (d, s) in enumerate(zip(datas, grid.specs)):
        if tuple(d.shape[:3]) != s.shape or tuple(d.shape[3:]) != trailing:
            raise AssemblyError(f"patch {i} has shape {tuple(d.shape)}, expected {s.shape + trailing}")
        wi = grid.weights(i)
        if is_torch:
            wi = torch.from_numpy(wi).to(dev)
            d = d.to(torch.float64)
        wb = wi.reshape(wi.shape + (1,) * len(trailing))
        acc[s.t0:s.t1, s.y0:s.y1, s.x0:s.x1] += wb * d
        wsum[s.t0:s.t1, s.y0:s.y1, s.x0:s.x1] += wi
    if (wsum <= 0).any():
        raise AssemblyError("patches do not cover the volume")
    out = acc / wsum.reshape(wsum.shape + (1,) * len(trailing))
    out = out.to(dt) if is_torch else out.astype(dt)
    return wrap(out)
