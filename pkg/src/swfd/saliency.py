"""Grad-CAM heatmaps and salient-region extraction.

The heatmap for category ``t`` at a convolutional layer is the ReLU of the
channel-weighted feature sum, where each channel's weight is the spatial
mean of d logit_t / d A. The thresholded heatmap's bounding box is cropped,
scaled to fit the image (aspect preserved) and zero-padded back to size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from swfd.data import quantize
from swfd.models import ClassifierHandle, LayerRef


@dataclass(frozen=True)
class HeatMap:
    values: torch.Tensor  # (H, W), nonnegative, max 1 unless all zero
    source_layer: LayerRef | None = None
    category: int | None = None


@dataclass(frozen=True)
class SalientRegion:
    bbox: tuple[int, int, int, int]  # top, left, height, width
    image: torch.Tensor
    fallback: bool = False


def _normalize_weights(raw: torch.Tensor) -> torch.Tensor:
    peak = raw.abs().max()
    return raw / peak if peak > 0 else torch.zeros_like(raw)


def gradcam_channel_weights(model: ClassifierHandle, x: torch.Tensor, layer: LayerRef, t: int):
    """Return ``(weights (C_k,), features (C_k, H_k, W_k))`` for one image.

    Weights are gradient spatial means divided by the largest magnitude, so
    they lie in [-1, 1].
    """
    inp = x.unsqueeze(0).detach().clone().requires_grad_(True)
    logits, feats = model.capture_features(inp, [layer], grad=True)
    a = feats[layer]
    if not a.requires_grad:
        return torch.zeros(a.shape[1], dtype=a.dtype), a[0].detach()
    (grad,) = torch.autograd.grad(logits[0, t], a, allow_unused=True)
    if grad is None:
        return torch.zeros(a.shape[1], dtype=a.dtype), a[0].detach()
    raw = grad[0].sum(dim=(1, 2)) / (grad.shape[2] * grad.shape[3])
    return _normalize_weights(raw.detach()), a[0].detach()


def gradcam_heatmap(weights: torch.Tensor, features: torch.Tensor, layer=None, category=None) -> HeatMap:
    if weights.shape[0] != features.shape[0]:
        raise ValueError(f"{weights.shape[0]} weights for {features.shape[0]} channels")
    h = F.relu((weights[:, None, None] * features).sum(dim=0))
    peak = h.max()
    h = h / peak if peak > 0 else torch.zeros_like(h)
    return HeatMap(h, layer, category)


def upsample_bilinear(h: HeatMap, height: int, width: int) -> HeatMap:
    """Corner-aligned bilinear interpolation to (height, width)."""
    src = h.values
    if (height, width) == tuple(src.shape):
        return h
    if height < src.shape[0] or width < src.shape[1]:
        raise ValueError("target size must be at least the source size")
    out = F.interpolate(src[None, None], size=(height, width), mode="bilinear", align_corners=True)[0, 0]
    return HeatMap(out.clamp(0, 1), h.source_layer, h.category)


def mask_bbox(mask: np.ndarray):
    """Tight ``(top, left, height, width)`` of a boolean mask, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def scale_and_pad(crop: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Aspect-preserving resize of a (C, h, w) crop to fit, centred, zero padded."""
    ch, cw = crop.shape[-2:]
    scale = min(height / ch, width / cw)
    nh = min(height, max(1, round(ch * scale)))
    nw = min(width, max(1, round(cw * scale)))
    if (nh, nw) != (ch, cw):
        crop = F.interpolate(crop[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
    top = (height - nh) // 2
    left = (width - nw) // 2
    return F.pad(crop, (left, width - nw - left, top, height - nh - top), value=0.0)


def extract_salient_region(x: torch.Tensor, h: HeatMap, eps_b: float = 0.5) -> SalientRegion:
    if not 0 < eps_b < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {eps_b}")
    height, width = x.shape[-2:]
    if tuple(h.values.shape) != (height, width):
        raise ValueError("heatmap must be upsampled to the image size first")
    bbox = mask_bbox((h.values >= eps_b).cpu().numpy())
    if bbox is None:
        return SalientRegion((0, 0, height, width), x.clone(), fallback=True)
    top, left, bh, bw = bbox
    image = scale_and_pad(x[:, top:top + bh, left:left + bw], height, width)
    return SalientRegion(bbox, quantize(image))


def non_salient_image(x: torch.Tensor, h: HeatMap, eps_b: float = 0.5) -> torch.Tensor:
    """The image with every suprathreshold pixel blacked out."""
    keep = (h.values < eps_b).to(x.dtype)
    return x * keep


def compute_heatmap(model: ClassifierHandle, x: torch.Tensor, t: int, depth_index: int = 4) -> HeatMap:
    """Grad-CAM at the model's registered layer, upsampled to the input size, max 1."""
    layer = model.layer(depth_index)
    weights, feats = gradcam_channel_weights(model, x, layer, t)
    hm = upsample_bilinear(gradcam_heatmap(weights, feats, layer, t), *x.shape[-2:])
    # interpolation can miss the coarse peak, so normalise again at full size
    peak = hm.values.max()
    return HeatMap(hm.values / peak if peak > 0 else hm.values, layer, t)


def salient_region(model: ClassifierHandle, x: torch.Tensor, y_true: int, eps_b: float = 0.5, depth_index: int = 4):
    """Heatmap for the true class and the salient region derived from it."""
    hm = compute_heatmap(model, x, y_true, depth_index)
    return hm, extract_salient_region(x, hm, eps_b)
