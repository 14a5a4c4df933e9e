"""Input diversity (DI), translation-invariant gradient smoothing (TI) and
random crop-resize (RCR) of the salient image.

All stochastic transforms take a caller-owned ``numpy.random.Generator`` and
are differentiable with respect to the image for a fixed draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class DiParams:
    p: float = 0.7
    resize_low: int = 224
    resize_high: int = 246

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError(f"DI probability must be in [0, 1], got {self.p}")
        if self.resize_low > self.resize_high:
            raise ValueError("resize_low must not exceed resize_high")

    @classmethod
    def for_size(cls, native: int, p: float = 0.7, high_frac: float = 1.1) -> "DiParams":
        return cls(p=p, resize_low=native, resize_high=max(native, math.floor(high_frac * native)))


@dataclass(frozen=True)
class TiKernel:
    kernel: np.ndarray = field(repr=False)

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"TI kernel must be square with odd side, got {k.shape}")
        if (k < 0).any() or not np.isclose(k.sum(), 1.0):
            raise ValueError("TI kernel must be nonnegative and sum to 1")
        if not np.allclose(k, k.T):
            raise ValueError("TI kernel must be symmetric")
        object.__setattr__(self, "kernel", k)

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    @classmethod
    def gaussian(cls, size: int = 7, sigma: float = 3.0) -> "TiKernel":
        if size == 1:
            return cls.identity()
        x = np.arange(size) - size // 2
        g = np.exp(-(x**2) / (2 * sigma**2))
        k = np.outer(g, g)
        return cls(k / k.sum())

    @classmethod
    def identity(cls) -> "TiKernel":
        return cls(np.ones((1, 1)))


@dataclass(frozen=True)
class RcrParams:
    s_l: float = 0.2
    s_int: float = 0.0

    def __post_init__(self):
        if not 0 < self.s_l <= 1 or self.s_int < 0 or self.s_l + self.s_int > 1 + 1e-12:
            raise ValueError(f"need 0 < s_l <= 1 and s_l + s_int <= 1, got ({self.s_l}, {self.s_int})")


def _resize(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if tuple(x.shape[-2:]) == (h, w):
        return x
    return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)


def di_transform(x: torch.Tensor, params: DiParams, rng: np.random.Generator, return_draw: bool = False):
    """Random resize-and-pad with probability ``p``; output shape equals input.

    A draw resizes to ``side`` in [resize_low, resize_high], zero-pads at a
    random offset to ``resize_high`` and resizes back to the native size.
    One draw is shared by the whole batch. Draw order: uniform gate, then
    (only if applied) side, top, left.
    """
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    h, w = xb.shape[-2:]
    draw = None
    if rng.random() < params.p:
        side = int(rng.integers(params.resize_low, params.resize_high + 1))
        rem = params.resize_high - side
        top = int(rng.integers(0, rem + 1))
        left = int(rng.integers(0, rem + 1))
        draw = (side, top, left)
        out = _resize(xb, side, side)
        if rem:
            out = F.pad(out, (left, rem - left, top, rem - top), value=0.0)
        out = _resize(out, h, w)
    else:
        out = xb
    out = out if batched else out.squeeze(0)
    return (out, draw) if return_draw else out


def ti_smooth(g: torch.Tensor, kernel: TiKernel) -> torch.Tensor:
    """Depthwise 2-D convolution of each channel with replicate padding."""
    if kernel.size == 1:
        return g * float(kernel.kernel[0, 0])
    batched = g.dim() == 4
    gb = g if batched else g.unsqueeze(0)
    c = gb.shape[1]
    pad = kernel.size // 2
    weight = torch.as_tensor(kernel.kernel, dtype=gb.dtype, device=gb.device)
    weight = weight.expand(c, 1, kernel.size, kernel.size)
    out = F.conv2d(F.pad(gb, (pad, pad, pad, pad), mode="replicate"), weight, groups=c)
    return out if batched else out.squeeze(0)


def sample_crop_box(h: int, w: int, params: RcrParams, rng: np.random.Generator):
    """Continuous crop box ``(top, left, height, width)`` covering exactly ``a*h*w``.

    a ~ U[s_l, s_l + s_int]; aspect ratio log-uniform in [3/4, 4/3]. If a
    side would overflow the image it is clipped and the other side grows so
    the area is preserved. Draw order: area, log-ratio, top, left.
    """
    a = rng.uniform(params.s_l, params.s_l + params.s_int)
    ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    area = a * h * w
    cw = math.sqrt(area * ratio)
    ch = math.sqrt(area / ratio)
    if cw > w:
        cw, ch = float(w), area / w
    if ch > h:
        ch, cw = float(h), area / h
    top = rng.uniform(0, h - ch)
    left = rng.uniform(0, w - cw)
    return top, left, ch, cw


def crop_resize(x: torch.Tensor, box, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinearly resample the continuous ``box`` of ``x`` onto an out_h x out_w grid."""
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    h, w = xb.shape[-2:]
    top, left, ch, cw = box
    if (top, left, ch, cw) == (0, 0, h, w) and (out_h, out_w) == (h, w):
        out = xb
    else:
        # pixel-centre coordinates of the output grid mapped into the box,
        # then to grid_sample's [-1, 1] range (align_corners=False)
        ys = top + (torch.arange(out_h, dtype=torch.float64) + 0.5) * ch / out_h
        xs = left + (torch.arange(out_w, dtype=torch.float64) + 0.5) * cw / out_w
        gy = (2 * ys / h - 1).to(xb.dtype)
        gx = (2 * xs / w - 1).to(xb.dtype)
        grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)
        grid = grid.unsqueeze(0).expand(xb.shape[0], -1, -1, -1)
        out = F.grid_sample(xb, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out if batched else out.squeeze(0)


def rcr(x_sa: torch.Tensor, params: RcrParams, rng: np.random.Generator, return_box: bool = False):
    h, w = x_sa.shape[-2:]
    box = sample_crop_box(h, w, params, rng)
    out = crop_resize(x_sa, box, h, w)
    return (out, box) if return_box else out
