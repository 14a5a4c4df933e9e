"""Momentum sign-gradient attacks: the DTMI baseline and the SWFD variant.

The perturbation is tracked in integer pixel levels (1/255 units) so every
iterate ``x + delta`` lies exactly on the 8-bit grid and the L-inf budget is
enforced without floating-point drift.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from swfd import saliency
from swfd.data import AdversarialResult, LabeledExample, LEVELS, from_levels, to_levels
from swfd.models import ClassifierHandle, ShapeError
from swfd.transforms import DiParams, RcrParams, TiKernel, di_transform, rcr, ti_smooth
from swfd.wfd import WfdParams, make_transform

LOSS_KINDS = ("CE", "Logit")
AUX_SOURCES = ("salient", "whole", "non_salient")


def _grid_levels(value: float, name: str) -> int:
    levels = round(value * LEVELS)
    if abs(value * LEVELS - levels) > 1e-6:
        raise ValueError(f"{name}={value} is not a multiple of 1/255")
    return levels


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    max_iters: int = 500
    mu: float = 1.0
    loss_kind: str = "CE"
    di_p: float = 0.7
    di_high_frac: float = 1.1
    ti_size: int = 7
    ti_sigma: float = 3.0
    rcr: RcrParams = field(default_factory=RcrParams)
    wfd: WfdParams | None = None
    use_salient_branch: bool = False
    epsilon_b: float = 0.5
    aux_source: str = "salient"
    cam_depth: int = 4
    seed: int = 0
    checkpoints: tuple[int, ...] = (100, 300, 500)

    def __post_init__(self):
        eps_l = _grid_levels(self.epsilon, "epsilon")
        alpha_l = _grid_levels(self.alpha, "alpha")
        if alpha_l > eps_l:
            raise ValueError("alpha must not exceed epsilon")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.aux_source not in AUX_SOURCES:
            raise ValueError(f"aux_source must be one of {AUX_SOURCES}")
        object.__setattr__(self, "checkpoints", tuple(int(c) for c in self.checkpoints))

    @property
    def epsilon_levels(self) -> int:
        return round(self.epsilon * LEVELS)

    @property
    def alpha_levels(self) -> int:
        return round(self.alpha * LEVELS)

    def di_params(self, native: int) -> DiParams:
        return DiParams.for_size(native, self.di_p, self.di_high_frac)

    def ti_kernel(self) -> TiKernel:
        return TiKernel.gaussian(self.ti_size, self.ti_sigma)

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.wfd is not None and self.wfd.layer is not None:
            d["wfd"]["layer"] = dataclasses.asdict(self.wfd.layer)
        d["checkpoints"] = list(self.checkpoints)
        return d

    def digest(self, *extra) -> str:
        blob = json.dumps([self.to_dict(), *extra], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AttackState:
    delta: torch.Tensor
    g: torch.Tensor
    iteration: int = 0
    zero_grad_steps: int = 0

    @classmethod
    def initial(cls, x: torch.Tensor) -> "AttackState":
        return cls(torch.zeros_like(x), torch.zeros_like(x))


def example_rng(seed: int, example_id: str) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by the run seed and example id."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(example_id.encode())])))


def classification_loss(logits: torch.Tensor, target, kind: str = "CE") -> torch.Tensor:
    """Per-example loss to be minimized: CE or negative target logit."""
    target = torch.as_tensor(target, device=logits.device).reshape(-1)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if target.numel() == 1 and logits.shape[0] > 1:
        target = target.expand(logits.shape[0])
    if kind == "CE":
        return F.cross_entropy(logits, target, reduction="none")
    if kind == "Logit":
        return -logits.gather(1, target[:, None]).squeeze(1)
    raise ValueError(f"unknown loss kind {kind!r}")


def attack_step(state: AttackState, gradient: torch.Tensor, x: torch.Tensor, cfg: AttackConfig) -> AttackState:
    """Smooth, L1-normalise, accumulate momentum, take a sign step, project.

    An all-zero smoothed gradient contributes nothing (no division) and is
    counted in ``zero_grad_steps``.
    """
    if gradient.shape != state.delta.shape:
        raise ShapeError(f"gradient shape {tuple(gradient.shape)} != delta shape {tuple(state.delta.shape)}")
    smoothed = ti_smooth(gradient, cfg.ti_kernel())
    norm = smoothed.abs().sum()
    zero = bool(norm == 0)
    normalized = torch.zeros_like(smoothed) if zero else smoothed / norm
    g = cfg.mu * state.g + normalized

    x_l = to_levels(x)
    d_l = torch.round(state.delta.double() * LEVELS).to(torch.int64)
    d_l = d_l - cfg.alpha_levels * torch.sign(g).to(torch.int64)
    d_l = d_l.clamp(-cfg.epsilon_levels, cfg.epsilon_levels)
    d_l = (x_l + d_l).clamp(0, LEVELS) - x_l
    assert d_l.numel() == 0 or int(d_l.abs().max()) <= cfg.epsilon_levels
    delta = from_levels(d_l, x.dtype)
    return AttackState(delta, g, state.iteration + 1, state.zero_grad_steps + zero)


def _check_example(model: ClassifierHandle, example: LabeledExample) -> torch.Tensor:
    x = example.image.to(model.dtype)
    if tuple(x.shape) != (3, model.input_size, model.input_size):
        raise ShapeError(
            f"{example.id}: image {tuple(x.shape)} does not match {model.name} input {model.input_size}"
        )
    return x


def _finish(example, x, state, trace, snapshots, flags) -> AdversarialResult:
    adv = from_levels(to_levels(x) + to_levels_signed(state.delta), x.dtype)
    return AdversarialResult(
        example_id=example.id,
        adv_image=adv,
        perturbation=state.delta,
        iterations_used=state.iteration,
        loss_trace=tuple(trace),
        snapshots=snapshots,
        target_label=example.target_label,
        true_label=example.true_label,
        flags=tuple(flags) + (("zero_gradient",) if state.zero_grad_steps else ()),
    )


def to_levels_signed(delta: torch.Tensor) -> torch.Tensor:
    return torch.round(delta.double() * LEVELS).to(torch.int64)


def _grad_wrt_delta(loss_of_delta, delta):
    d = delta.clone().requires_grad_(True)
    loss = loss_of_delta(d)
    if not loss.requires_grad:
        return loss.detach(), torch.zeros_like(delta)
    (grad,) = torch.autograd.grad(loss, d)
    return loss.detach(), grad


def run_dtmi_baseline(model: ClassifierHandle, example: LabeledExample, cfg: AttackConfig) -> AdversarialResult:
    """Targeted DI-TI-MI: minimize J(f(T(x + delta)), y_t)."""
    x = _check_example(model, example)
    rng = example_rng(cfg.seed, example.id)
    di = cfg.di_params(model.input_size)
    target = torch.tensor([example.target_label])
    state = AttackState.initial(x)
    trace, snapshots = [], {}

    def loss_of(d):
        logits = model.forward(di_transform(x + d, di, rng))
        return classification_loss(logits, target, cfg.loss_kind).sum()

    for _ in range(cfg.max_iters):
        loss, grad = _grad_wrt_delta(loss_of, state.delta)
        state = attack_step(state, grad, x, cfg)
        trace.append(float(loss))
        if state.iteration in cfg.checkpoints:
            snapshots[state.iteration] = state.delta.clone()
    return _finish(example, x, state, trace, snapshots, ())


def auxiliary_source(model, example, x, cfg):
    """Stage one: the image RCR crops from, plus result flags and bbox."""
    if cfg.aux_source == "whole":
        return x, (), None
    # Grad-CAM is always taken for the true class
    hm, region = saliency.salient_region(model, x, example.true_label, cfg.epsilon_b, cfg.cam_depth)
    flags = ("salient_fallback",) if region.fallback else ()
    if cfg.aux_source == "non_salient":
        return saliency.non_salient_image(x, hm, cfg.epsilon_b), flags, region.bbox
    return region.image.to(x.dtype), flags, region.bbox


def joint_loss(model, x, x_sa, delta, target, cfg: AttackConfig, rng, di: DiParams | None = None) -> torch.Tensor:
    """Original-branch loss plus (optionally) the auxiliary-branch loss.

    The caller is responsible for installing the feature-drop transform.
    Both branches share one forward pass; per-example masks keep them
    independent.
    """
    di = di or cfg.di_params(model.input_size)
    inputs = [di_transform(x + delta, di, rng)]
    if cfg.use_salient_branch:
        x_aux = rcr(x_sa, cfg.rcr, rng)
        inputs.append(di_transform(x_aux + delta, di, rng))
    logits = model.forward(torch.stack(inputs))
    return classification_loss(logits, torch.as_tensor(target), cfg.loss_kind).sum()


def run_swfd_attack(model: ClassifierHandle, example: LabeledExample, cfg: AttackConfig) -> AdversarialResult:
    """Salient-region auxiliary branch plus weighted feature drop.

    With ``wfd=None`` and ``use_salient_branch=False`` this consumes the RNG
    exactly like :func:`run_dtmi_baseline` and yields the same trajectory.
    """
    x = _check_example(model, example)
    rng = example_rng(cfg.seed, example.id)
    di = cfg.di_params(model.input_size)
    flags: tuple = ()
    x_sa = None
    if cfg.use_salient_branch:
        x_sa, flags, _ = auxiliary_source(model, example, x, cfg)
    state = AttackState.initial(x)
    trace, snapshots = [], {}

    def loss_of(d):
        return joint_loss(model, x, x_sa, d, example.target_label, cfg, rng, di)

    def loop():
        nonlocal state
        for _ in range(cfg.max_iters):
            loss, grad = _grad_wrt_delta(loss_of, state.delta)
            state = attack_step(state, grad, x, cfg)
            trace.append(float(loss))
            if state.iteration in cfg.checkpoints:
                snapshots[state.iteration] = state.delta.clone()

    if cfg.wfd is not None:
        layer = cfg.wfd.layer or model.layer(cfg.wfd.depth_index)
        model.with_forward_transform(layer, make_transform(cfg.wfd, rng), loop)
    else:
        loop()
    return _finish(example, x, state, trace, snapshots, flags)
