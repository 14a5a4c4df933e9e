"""TOML run configuration with flat ``section.key=value`` overrides.

Example::

    [attack]
    epsilon = "16/255"
    alpha = "2/255"
    max_iters = 300
    loss = "CE"
    use_salient_branch = true

    [wfd]
    enabled = true
    p_w = 0.7

    [model]
    surrogate = "resnet50"
    victims = ["densenet121", "vgg16"]

    [data]
    manifest = "data/manifest.csv"
    limit = 100

Keys given without a section belong to ``attack``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from swfd.attack import AttackConfig
from swfd.transforms import RcrParams
from swfd.wfd import WfdParams


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "attack.epsilon": "16/255",
    "attack.alpha": "2/255",
    "attack.max_iters": 500,
    "attack.mu": 1.0,
    "attack.loss": "CE",
    "attack.use_salient_branch": False,
    "attack.epsilon_b": 0.5,
    "attack.aux_source": "salient",
    "attack.cam_depth": 4,
    "attack.seed": 0,
    "attack.checkpoints": [100, 300, 500],
    "di.p": 0.7,
    "di.resize_high_frac": 1.1,
    "ti.kernel_size": 7,
    "ti.kernel_sigma": 3.0,
    "rcr.s_l": 0.2,
    "rcr.s_int": 0.0,
    "wfd.enabled": False,
    "wfd.p_w": 0.7,
    "wfd.p_rnd": 0.7,
    "wfd.sigma": 1.3,
    "wfd.depth_index": None,
    "model.surrogate": "resnet50",
    "model.victims": [],
    "model.registry": None,
    "model.checkpoint_dir": None,
    "data.manifest": None,
    "data.limit": 100,
    "grid.methods": ["CE", "CE-SWFD"],
    "grid.sweep": [{}],
    "grid.ablation_loss": "CE",
    "stats.depth_index": 4,
}


def parse_number(value):
    """Accept plain numbers or fraction strings such as ``"16/255"``."""
    if isinstance(value, str) and "/" in value:
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse {value!r} as a fraction") from exc
    return value


def _flatten(doc: dict) -> dict:
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[f"attack.{key}"] = value
    return flat


def _check_keys(flat: dict) -> None:
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(sorted(DEFAULTS))}")


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not key=value")
    key = key.strip()
    if "." not in key:
        key = f"attack.{key}"
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def attack_config(self, wfd_depth: int = 3) -> AttackConfig:
        v = self.values
        try:
            wfd = None
            if v["wfd.enabled"]:
                depth = v["wfd.depth_index"] if v["wfd.depth_index"] is not None else wfd_depth
                wfd = WfdParams(p_w=float(v["wfd.p_w"]), p_rnd=float(v["wfd.p_rnd"]),
                                sigma=float(v["wfd.sigma"]), depth_index=int(depth))
            return AttackConfig(
                epsilon=float(parse_number(v["attack.epsilon"])),
                alpha=float(parse_number(v["attack.alpha"])),
                max_iters=int(v["attack.max_iters"]),
                mu=float(v["attack.mu"]),
                loss_kind=str(v["attack.loss"]),
                di_p=float(v["di.p"]),
                di_high_frac=float(v["di.resize_high_frac"]),
                ti_size=int(v["ti.kernel_size"]),
                ti_sigma=float(v["ti.kernel_sigma"]),
                rcr=RcrParams(float(v["rcr.s_l"]), float(v["rcr.s_int"])),
                wfd=wfd,
                use_salient_branch=bool(v["attack.use_salient_branch"]),
                epsilon_b=float(v["attack.epsilon_b"]),
                aux_source=str(v["attack.aux_source"]),
                cam_depth=int(v["attack.cam_depth"]),
                seed=int(v["attack.seed"]),
                checkpoints=tuple(int(c) for c in v["attack.checkpoints"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolve_path(self, key):
        value = self.values[key]
        if value is None:
            return None
        path = Path(value)
        if not path.is_absolute() and self.source is not None:
            path = Path(self.source).parent / path
        return path

    def to_json(self) -> str:
        return json.dumps({"source": self.source, "values": self.values}, indent=2, sort_keys=True)


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    values = dict(DEFAULTS)
    source = None
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        flat = _flatten(doc)
        _check_keys(flat)
        values.update(flat)
        source = str(path)
    flat = dict(parse_override(o) for o in overrides)
    _check_keys(flat)
    values.update(flat)
    if seed is not None:
        values["attack.seed"] = int(seed)
    cfg = RunConfig(values, source)
    cfg.attack_config()  # validate eagerly
    return cfg
