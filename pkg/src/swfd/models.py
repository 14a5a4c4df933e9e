"""Uniform adapter over differentiable image classifiers.

A :class:`ClassifierHandle` works purely in [0, 1] pixel space; per-channel
normalization happens inside. Intermediate layers are addressed by depth
index 1-4 through a declarative registry (``registry.json``), and forward
hooks are installed only inside scoped context managers.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn

CHECKPOINT_ENV = "SWFD_CHECKPOINT_DIR"


class RegistryError(KeyError):
    pass


class ModelLoadError(RuntimeError):
    pass


class CapabilityError(RuntimeError):
    """Operation not permitted on this handle (e.g. gradients on a victim)."""


class HookError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerRef:
    model_name: str
    depth_index: int
    internal_path: str
    display_name: str = ""


def default_checkpoint_dir() -> Path:
    return Path(os.environ.get(CHECKPOINT_ENV, Path.home() / ".cache" / "swfd"))


def load_registry(path=None) -> dict:
    """Built-in registry, optionally extended/overridden by a user JSON file."""
    text = resources.files("swfd").joinpath("registry.json").read_text()
    registry = {k: v for k, v in json.loads(text).items() if not k.startswith("_")}
    if path is not None:
        extra = json.loads(Path(path).read_text())
        registry.update({k: v for k, v in extra.items() if not k.startswith("_")})
    return registry


def resolve_layer(model_name: str, depth_index: int, registry: dict | None = None) -> LayerRef:
    registry = load_registry() if registry is None else registry
    try:
        entry = registry[model_name]
        path = entry["layers"][str(depth_index)]
    except KeyError:
        raise RegistryError(f"no layer registered for ({model_name!r}, {depth_index})") from None
    name = entry.get("layer_names", {}).get(str(depth_index), path)
    return LayerRef(model_name, int(depth_index), path, name)


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class ClassifierHandle:
    """A model plus its preprocessing, layer registry and hook bookkeeping.

    Not safe for concurrent hook installation; use one handle per worker.
    """

    def __init__(
        self,
        name: str,
        net: nn.Module,
        input_size: int,
        mean=(0.0, 0.0, 0.0),
        std=(1.0, 1.0, 1.0),
        num_categories: int = 1000,
        layers: dict | None = None,
        layer_names: dict | None = None,
        read_only: bool = False,
    ):
        self.name = name
        self.net = net.eval()
        self.input_size = int(input_size)
        self.num_categories = int(num_categories)
        self.normalize = Normalize(mean, std)
        self.layers = {int(k): v for k, v in (layers or {}).items()}
        self.layer_names = {int(k): v for k, v in (layer_names or {}).items()}
        self.read_only = read_only
        self.wfd_depth = 3
        self._active: dict[str, object] = {}
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __repr__(self):
        mode = "victim" if self.read_only else "surrogate"
        return f"ClassifierHandle({self.name!r}, {self.input_size}px, {mode})"

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def to(self, dtype=None, device=None):
        self.net.to(device=device, dtype=dtype)
        self.normalize.to(device=device, dtype=dtype)
        return self

    def as_victim(self) -> "ClassifierHandle":
        """Read-only view sharing the same weights: inference only."""
        view = ClassifierHandle.__new__(ClassifierHandle)
        view.__dict__.update(self.__dict__)
        view.read_only = True
        view._active = {}
        return view

    def _require_white_box(self, op):
        if self.read_only:
            raise CapabilityError(f"{op} is not allowed on black-box handle {self.name!r}")

    def _batch(self, batch) -> torch.Tensor:
        if isinstance(batch, (list, tuple)):
            batch = torch.stack(list(batch))
        if batch.dim() == 3:
            batch = batch.unsqueeze(0)
        if batch.dim() != 4 or batch.shape[1] != 3 or tuple(batch.shape[-2:]) != (self.input_size,) * 2:
            raise ShapeError(
                f"{self.name} expects (B, 3, {self.input_size}, {self.input_size}), got {tuple(batch.shape)}"
            )
        return batch.to(self.dtype)

    def forward(self, batch) -> torch.Tensor:
        """Differentiable forward pass (surrogates only)."""
        self._require_white_box("forward")
        return self.net(self.normalize(self._batch(batch)))

    def logits(self, batch) -> torch.Tensor:
        """Pre-softmax scores, shape (B, num_categories), without autograd."""
        with torch.no_grad():
            out = self.net(self.normalize(self._batch(batch)))
        if out.shape[-1] != self.num_categories:
            raise ShapeError(f"{self.name} produced {out.shape[-1]} scores, expected {self.num_categories}")
        return out

    def predict(self, batch) -> torch.Tensor:
        return self.logits(batch).argmax(dim=1)

    def input_gradient(self, loss_fn: Callable, batch, targets) -> torch.Tensor:
        """Gradient of ``sum(loss_fn(logits, targets))`` w.r.t. the input pixels."""
        self._require_white_box("input_gradient")
        x = self._batch(batch).detach().clone().requires_grad_(True)
        loss = loss_fn(self.net(self.normalize(x)), torch.as_tensor(targets)).sum()
        if not loss.requires_grad:
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
        return torch.zeros_like(x) if grad is None else grad

    def layer(self, depth_index: int) -> LayerRef:
        if depth_index not in self.layers:
            raise RegistryError(f"no layer registered for ({self.name!r}, {depth_index})")
        path = self.layers[depth_index]
        return LayerRef(self.name, depth_index, path, self.layer_names.get(depth_index, path))

    def module_at(self, layer: LayerRef | str) -> nn.Module:
        path = layer.internal_path if isinstance(layer, LayerRef) else layer
        if isinstance(layer, LayerRef) and layer.model_name != self.name:
            raise RegistryError(f"layer belongs to {layer.model_name!r}, not {self.name!r}")
        try:
            return self.net.get_submodule(path)
        except AttributeError:
            raise RegistryError(f"{self.name} has no sub-layer {path!r}") from None

    def capture_features(self, batch, layers, grad: bool = False):
        """One forward pass recording each layer's output; returns (logits, {layer: map})."""
        self._require_white_box("capture_features")
        layers = list(layers)
        modules = [self.module_at(layer) for layer in layers]
        store = {}
        handles = []

        def make_hook(key):
            def hook(module, inputs, output):
                store[key] = output
            return hook

        try:
            for layer, module in zip(layers, modules):
                handles.append(module.register_forward_hook(make_hook(layer)))
            if grad:
                out = self.forward(batch)
            else:
                with torch.no_grad():
                    out = self.forward(batch)
        finally:
            for h in handles:
                h.remove()
        return out, store

    def capture_feature(self, batch, layer: LayerRef) -> torch.Tensor:
        return self.capture_features(batch, [layer])[1][layer]

    @contextmanager
    def forward_transform(self, layer: LayerRef, transform: Callable[[torch.Tensor], torch.Tensor]):
        """Apply ``transform`` to ``layer``'s output on every forward inside the block."""
        self._require_white_box("forward_transform")
        module = self.module_at(layer)
        key = layer.internal_path
        if key in self._active:
            raise HookError(f"a forward transform is already installed on {self.name}:{key}")

        def hook(mod, inputs, output):
            new = transform(output)
            if new.shape != output.shape:
                raise ShapeError(f"transform changed shape {tuple(output.shape)} -> {tuple(new.shape)}")
            return new

        handle = module.register_forward_hook(hook)
        self._active[key] = handle
        try:
            yield self
        finally:
            handle.remove()
            del self._active[key]

    def with_forward_transform(self, layer: LayerRef, transform, body: Callable):
        with self.forward_transform(layer, transform):
            return body()

    def final_linear(self) -> nn.Linear:
        last = None
        for module in self.net.modules():
            if isinstance(module, nn.Linear):
                last = module
        if last is None:
            raise CapabilityError(f"{self.name} has no accessible final linear layer")
        return last


def _build_net(entry: dict) -> nn.Module:
    kind, _, arch = entry["builder"].partition(":")
    kwargs = dict(entry.get("kwargs", {}))
    if kind == "torchvision":
        import torchvision

        return torchvision.models.get_model(arch, weights=None, num_classes=entry["num_categories"], **kwargs)
    if kind == "toy":
        from swfd import toy

        return toy.build(arch, num_classes=entry["num_categories"], **kwargs)
    raise RegistryError(f"unknown builder {entry['builder']!r}")


def _load_weights(name: str, entry: dict, net: nn.Module, checkpoint_dir: Path) -> None:
    source = entry.get("checkpoint")
    local = checkpoint_dir / f"{name}.pth"
    if source and source.startswith("file:"):
        local = checkpoint_dir / source[len("file:"):]
    if local.is_file():
        state = torch.load(local, map_location="cpu", weights_only=True)
        net.load_state_dict(state.get("state_dict", state) if isinstance(state, dict) else state)
        return
    if source and source.startswith("torchvision:"):
        import torchvision

        arch = entry["builder"].partition(":")[2]
        try:
            weights = torchvision.models.get_model_weights(arch)[source.partition(":")[2]]
            state = weights.get_state_dict(progress=False, model_dir=str(checkpoint_dir))
        except Exception as exc:  # network, missing file, corrupt download
            raise ModelLoadError(f"{name}: cannot obtain checkpoint {source} ({exc})") from exc
        if arch == "inception_v3":
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits")}
            net.transform_input = True
        net.load_state_dict(state)
        return
    raise ModelLoadError(f"{name}: checkpoint not found at {local}")


def load_model(
    name: str,
    registry: dict | None = None,
    checkpoint_dir=None,
    random_init: bool = False,
    seed: int = 0,
    dtype=torch.float32,
) -> ClassifierHandle:
    """Instantiate a registered model.

    ``random_init=True`` (or a registry entry with ``checkpoint: null``)
    skips weight loading and seeds the initializer, which is enough for
    gradient and shape checks.
    """
    registry = load_registry() if registry is None else registry
    if name not in registry:
        raise RegistryError(f"unknown model {name!r}; known: {sorted(registry)}")
    entry = registry[name]
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else default_checkpoint_dir()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _build_net(entry)
    if not random_init and entry.get("checkpoint") is not None:
        _load_weights(name, entry, net, checkpoint_dir)
    handle = ClassifierHandle(
        name,
        net,
        entry["input_size"],
        entry["mean"],
        entry["std"],
        entry["num_categories"],
        entry.get("layers", {}),
        entry.get("layer_names", {}),
    )
    handle.wfd_depth = int(entry.get("wfd_depth", 3))
    return handle.to(dtype=dtype)
