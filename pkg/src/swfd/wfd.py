"""Weighted feature drop.

Channels of an intermediate feature map are weighted by their absolute
spatial mean times a N(1, sigma^2) factor. Channels whose weight exceeds the
k-th smallest weight are zeroed; the survivors are each kept with probability
``p_rnd``. High-activation channels are therefore the likeliest to vanish.

RNG draw order per call (relied on by the tests): one normal block of shape
(B, C) for the weight noise, then one binomial block of shape (B, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from swfd.models import LayerRef


@dataclass(frozen=True)
class WfdParams:
    p_w: float = 0.7
    p_rnd: float = 0.7
    sigma: float = 1.3
    layer: LayerRef | None = None
    depth_index: int = 3

    def __post_init__(self):
        if not 0 < self.p_w <= 1:
            raise ValueError(f"p_w must be in (0, 1], got {self.p_w}")
        if not 0 < self.p_rnd <= 1:
            raise ValueError(f"p_rnd must be in (0, 1], got {self.p_rnd}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class ChannelDecision:
    means: np.ndarray
    weights: np.ndarray
    threshold: float
    k: int
    kept: np.ndarray
    bernoulli: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.kept * self.bernoulli


def channel_means(f: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel; works on (C, H, W) or (B, C, H, W)."""
    return f.mean(dim=(-2, -1))


def sample_channel_weights(means, sigma: float, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(means, dtype=np.float64)
    r = rng.normal(1.0, sigma, size=means.shape)
    return r * np.abs(means)


def drop_threshold(weights, p_w: float) -> tuple[int, float]:
    """Return ``(k, kth smallest weight)`` for a 1-D weight vector.

    ``k = floor(p_w * nnz) + C - nnz`` where nnz counts nonzero weights,
    clamped to at least 1.
    """
    weights = np.asarray(weights)
    c = weights.shape[-1]
    nnz = int(np.count_nonzero(weights))
    # guard against p_w * nnz landing a hair below an integer
    k = math.floor(p_w * nnz + 1e-9) + c - nnz
    k = max(k, 1)
    return k, float(np.partition(weights, k - 1)[k - 1])


def decide_channels(means, params: WfdParams, rng: np.random.Generator) -> ChannelDecision:
    """Channel keep/drop decision for one example (``means`` has shape (C,))."""
    means = np.asarray(means, dtype=np.float64)
    weights = sample_channel_weights(means, params.sigma, rng)
    k, thr = drop_threshold(weights, params.p_w)
    bern = rng.binomial(1, params.p_rnd, size=means.shape).astype(np.float64)
    return ChannelDecision(means, weights, thr, k, weights <= thr, bern)


def channel_mask(means: np.ndarray, params: WfdParams, rng: np.random.Generator) -> np.ndarray:
    """Vectorised mask for a batch of channel means of shape (B, C)."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    weights = sample_channel_weights(means, params.sigma, rng)
    bern = rng.binomial(1, params.p_rnd, size=means.shape).astype(np.float64)
    mask = np.empty_like(weights)
    for i, row in enumerate(weights):
        _, thr = drop_threshold(row, params.p_w)
        mask[i] = (row <= thr) * bern[i]
    return mask


def apply_wfd(f: torch.Tensor, params: WfdParams, rng: np.random.Generator) -> torch.Tensor:
    """Drop channels of ``f`` ((C, H, W) or (B, C, H, W)); fresh draws per call.

    The mask is computed from detached activations and multiplies the
    features, so gradients flow only through the retained channels.
    """
    batched = f.dim() == 4
    fb = f if batched else f.unsqueeze(0)
    means = channel_means(fb.detach()).double().cpu().numpy()
    mask = torch.from_numpy(channel_mask(means, params, rng)).to(fb)
    out = fb * mask[:, :, None, None]
    return out if batched else out.squeeze(0)


def make_transform(params: WfdParams, rng: np.random.Generator):
    """Closure suitable for ``ClassifierHandle.forward_transform``."""
    return lambda f: apply_wfd(f, params, rng)
