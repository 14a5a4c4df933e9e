"""Black-box evaluation: TASR, deep-layer distribution statistics, sweep
grids and result files.

Victim handles are always used through their read-only view, so no
gradient or hook operation can reach them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from swfd.attack import AttackConfig, run_dtmi_baseline, run_swfd_attack
from swfd.data import (
    AdversarialResult,
    LabeledExample,
    LEVELS,
    from_levels,
    load_delta,
    load_image,
    quantize,
    save_delta,
    save_image_lossless,
    to_levels,
)
from swfd.models import CapabilityError, ClassifierHandle, LayerRef
from swfd.wfd import WfdParams

log = logging.getLogger(__name__)

RESULTS_HEADER = ("surrogate", "victim", "method", "loss", "iters", "n", "successes", "tasr")
METHODS = ("CE", "Logit", "CE-SWFD", "Logit-SWFD", "SR-only", "WFD-only")


@dataclass(frozen=True)
class TasrRecord:
    surrogate: str
    victim: str
    method: str
    loss_kind: str
    iterations: int
    n_examples: int
    n_success: int
    resized: bool = False

    @property
    def tasr_percent(self) -> float:
        return 100.0 * self.n_success / self.n_examples if self.n_examples else 0.0

    def row(self) -> tuple:
        return (
            self.surrogate,
            self.victim,
            self.method,
            self.loss_kind,
            self.iterations,
            self.n_examples,
            self.n_success,
            f"{self.tasr_percent:.4f}",
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasr_percent"] = self.tasr_percent
        return d


@dataclass(frozen=True)
class DistributionStats:
    model: str
    layer: LayerRef
    sorted_channel_means: tuple[float, ...]
    mean: float
    variance: float


def original_levels(result: AdversarialResult) -> torch.Tensor:
    delta_l = torch.round(result.perturbation.double() * LEVELS).to(torch.int64)
    return to_levels(result.adv_image) - delta_l


def image_at(result: AdversarialResult, iteration: int | None = None) -> torch.Tensor:
    """Adversarial image from a stored checkpoint (``None`` = final)."""
    if iteration is None or iteration == result.iterations_used:
        return result.adv_image
    delta = result.snapshots[iteration]
    delta_l = torch.round(delta.double() * LEVELS).to(torch.int64)
    return from_levels(original_levels(result) + delta_l, result.adv_image.dtype)


def _fit(images: torch.Tensor, size: int):
    if images.shape[-1] == size and images.shape[-2] == size:
        return images, False
    out = F.interpolate(images.float(), size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return quantize(out), True


def evaluate_tasr(
    adv_set: list[AdversarialResult],
    victim: ClassifierHandle,
    targets=None,
    surrogate: str = "",
    method: str = "",
    loss_kind: str = "",
    iteration: int | None = None,
    batch_size: int = 32,
) -> TasrRecord:
    """Top-1 targeted success rate of ``adv_set`` on a black-box ``victim``."""
    victim = victim if victim.read_only else victim.as_victim()
    if targets is None:
        targets = [r.target_label for r in adv_set]
    targets = torch.as_tensor(list(targets), dtype=torch.long)
    success = 0
    resized = False
    for start in range(0, len(adv_set), batch_size):
        chunk = adv_set[start:start + batch_size]
        batch = torch.stack([image_at(r, iteration) for r in chunk])
        batch, was_resized = _fit(batch, victim.input_size)
        resized |= was_resized
        pred = victim.predict(batch)
        success += int((pred == targets[start:start + len(chunk)]).sum())
    iters = iteration if iteration is not None else (adv_set[0].iterations_used if adv_set else 0)
    return TasrRecord(surrogate, victim.name, method, loss_kind, iters, len(adv_set), success, resized)


def channel_statistics(model: ClassifierHandle, images, layer: LayerRef) -> np.ndarray:
    """Global-average-pooled channel outputs per image, shape (N, C)."""
    batch = torch.stack(list(images)) if isinstance(images, (list, tuple)) else images
    feats = model.capture_feature(batch, layer)
    return feats.double().mean(dim=(2, 3)).cpu().numpy()


def deep_layer_distribution(model: ClassifierHandle, images, layer: LayerRef, class_index: int) -> DistributionStats:
    """Image-averaged channel means ordered by the final linear weights of ``class_index``."""
    means = channel_statistics(model, images, layer).mean(axis=0)
    fc = model.final_linear()
    if fc.in_features != means.shape[0]:
        raise CapabilityError(
            f"{model.name}: final linear layer takes {fc.in_features} inputs, layer has {means.shape[0]} channels"
        )
    order = np.argsort(fc.weight[class_index].detach().double().cpu().numpy(), kind="stable")
    return distribution_from_means(model.name, layer, means[order])


def distribution_from_means(name: str, layer, sorted_means) -> DistributionStats:
    arr = np.asarray(sorted_means, dtype=np.float64)
    return DistributionStats(name, layer, tuple(arr.tolist()), float(arr.mean()), float(arr.var()))


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class GridCell:
    method: str
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridSpec:
    surrogate: str
    victims: tuple[str, ...]
    methods: tuple[str, ...] = ("CE", "CE-SWFD")
    overrides: tuple[dict, ...] = ({},)
    base: AttackConfig = field(default_factory=AttackConfig)
    ablation_loss: str = "CE"

    def cells(self) -> list[GridCell]:
        return [GridCell(m, dict(o)) for m in self.methods for o in self.overrides]


def method_config(method: str, base: AttackConfig, wfd_depth: int = 3, ablation_loss: str = "CE") -> AttackConfig:
    """Map a method name onto switches of the shared config.

    ``CE``/``Logit`` are DTMI baselines; ``*-SWFD`` enables both the salient
    branch and feature drop; ``SR-only``/``WFD-only`` are the ablations.
    """
    wfd = base.wfd or WfdParams(depth_index=wfd_depth)
    table = {
        "CE": ("CE", False, False),
        "Logit": ("Logit", False, False),
        "CE-SWFD": ("CE", True, True),
        "Logit-SWFD": ("Logit", True, True),
        "SR-only": (ablation_loss, True, False),
        "WFD-only": (ablation_loss, False, True),
    }
    if method not in table:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    loss, salient, drop = table[method]
    return base.replace(loss_kind=loss, use_salient_branch=salient, wfd=wfd if drop else None)


def apply_overrides(cfg: AttackConfig, overrides: dict) -> AttackConfig:
    """Flat ``section.key`` overrides (``wfd.p_w``, ``rcr.s_l``, ``max_iters`` ...)."""
    changes = {}
    wfd_changes = {}
    rcr_changes = {}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if section == "wfd":
            wfd_changes[name] = value
        elif section == "rcr":
            rcr_changes[name] = value
        elif section in ("di", "ti"):
            changes[f"{section}_{name}".replace("resize_high_frac", "high_frac").replace("kernel_", "")] = value
        elif section == "":
            changes[name] = value
        else:
            raise KeyError(key)
    if rcr_changes:
        changes["rcr"] = dataclasses.replace(cfg.rcr, **rcr_changes)
    if wfd_changes and cfg.wfd is not None:
        changes["wfd"] = dataclasses.replace(cfg.wfd, **wfd_changes)
    return cfg.replace(**changes)


def run_attacks(model: ClassifierHandle, examples, cfg: AttackConfig, progress: Callable | None = None):
    plain = cfg.wfd is None and not cfg.use_salient_branch
    attack = run_dtmi_baseline if plain else run_swfd_attack
    results = []
    for i, ex in enumerate(examples):
        results.append(attack(model, ex, cfg))
        if progress:
            progress(i + 1, len(examples))
    return results


def save_results_dir(results: list[AdversarialResult], out_dir, meta: dict | None = None) -> None:
    """``<id>_adv.png``, ``<id>_delta.bin`` and ``<id>_delta@<iter>.bin`` plus ``meta.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for r in results:
        save_image_lossless(r.adv_image, out_dir / f"{r.example_id}_adv.png")
        save_delta(r.perturbation, out_dir / f"{r.example_id}_delta.bin")
        for it, d in r.snapshots.items():
            save_delta(d, out_dir / f"{r.example_id}_delta@{it}.bin")
        index.append(
            {
                "id": r.example_id,
                "iterations": r.iterations_used,
                "target_label": r.target_label,
                "true_label": r.true_label,
                "snapshots": sorted(r.snapshots),
                "flags": list(r.flags),
                "final_loss": r.loss_trace[-1] if r.loss_trace else None,
            }
        )
    (out_dir / "meta.json").write_text(json.dumps({"meta": meta or {}, "examples": index}, indent=2))


def load_results_dir(out_dir) -> list[AdversarialResult]:
    out_dir = Path(out_dir)
    index = json.loads((out_dir / "meta.json").read_text())["examples"]
    results = []
    for e in index:
        results.append(
            AdversarialResult(
                example_id=e["id"],
                adv_image=load_image(out_dir / f"{e['id']}_adv.png"),
                perturbation=load_delta(out_dir / f"{e['id']}_delta.bin"),
                iterations_used=e["iterations"],
                snapshots={it: load_delta(out_dir / f"{e['id']}_delta@{it}.bin") for it in e["snapshots"]},
                target_label=e["target_label"],
                true_label=e["true_label"],
                flags=tuple(e["flags"]),
            )
        )
    return results


def _run_cell(grid: GridSpec, cell: GridCell, examples, load: Callable, cache_dir, handles: dict):
    def get(name):
        if name not in handles:
            handles[name] = load(name)
        return handles[name]

    surrogate = get(grid.surrogate)
    cfg = method_config(cell.method, grid.base, surrogate.wfd_depth, grid.ablation_loss)
    cfg = apply_overrides(cfg, cell.overrides)
    key = cfg.digest(grid.surrogate, [ex.id for ex in examples])
    cached = Path(cache_dir) / key if cache_dir is not None else None
    if cached is not None and (cached / "meta.json").is_file():
        log.info("cell %s %s: reusing %s", cell.method, cell.overrides, cached)
        results = load_results_dir(cached)
    else:
        results = run_attacks(surrogate, examples, cfg)
        if cached is not None:
            save_results_dir(results, cached, {"config": cfg.to_dict(), "surrogate": grid.surrogate, "method": cell.method})
    label = cell.method if not cell.overrides else f"{cell.method}{json.dumps(cell.overrides, sort_keys=True)}"
    iters = sorted({c for c in cfg.checkpoints if c < cfg.max_iters} | {cfg.max_iters})
    records = []
    for victim_name in grid.victims:
        victim = get(victim_name).as_victim()
        for it in iters:
            records.append(evaluate_tasr(results, victim, surrogate=grid.surrogate, method=label,
                                         loss_kind=cfg.loss_kind, iteration=it))
    return records


def _worker(args):
    grid, cell, examples, load, cache_dir = args
    return _run_cell(grid, cell, examples, load, cache_dir, {})


def run_experiment_grid(
    grid: GridSpec,
    examples: list[LabeledExample],
    load: Callable[[str], ClassifierHandle],
    cache_dir=None,
    workers: int = 1,
    errors: list | None = None,
) -> list[TasrRecord]:
    """Attack once per cell (cached by config hash), then score every victim.

    A failing cell is logged and appended to ``errors`` as ``(cell, exc)``;
    the remaining cells still run.
    """
    cells = grid.cells()
    records: list[TasrRecord] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(c, pool.submit(_worker, (grid, c, examples, load, cache_dir))) for c in cells]
            outcomes = []
            for c, fut in futures:
                try:
                    outcomes.append((c, fut.result(), None))
                except Exception as exc:
                    outcomes.append((c, None, exc))
    else:
        handles: dict = {}
        outcomes = []
        for c in cells:
            try:
                outcomes.append((c, _run_cell(grid, c, examples, load, cache_dir, handles), None))
            except Exception as exc:
                outcomes.append((c, None, exc))
    for cell, recs, exc in outcomes:
        if exc is not None:
            log.error("grid cell %s %s failed: %s", cell.method, cell.overrides, exc)
            if errors is not None:
                errors.append((cell, exc))
        else:
            records.extend(recs)
    return records


def summarize(records: list[TasrRecord], iterations: int | None = None) -> dict[str, float]:
    """Average TASR per method (over victims) at one iteration count."""
    if iterations is None and records:
        iterations = max(r.iterations for r in records)
    acc: dict[str, list[float]] = {}
    for r in records:
        if r.iterations == iterations:
            acc.setdefault(r.method, []).append(r.tasr_percent)
    return {m: float(np.mean(v)) for m, v in acc.items()}


def write_results(records: list[TasrRecord], path, provenance: dict | None = None) -> None:
    """CSV with a fixed header plus a ``.json`` mirror carrying provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for r in records:
            writer.writerow(r.row())
    payload = {"provenance": provenance or {}, "records": [r.to_dict() for r in records]}
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2, default=str))


def read_results(path) -> list[TasrRecord]:
    with open(path, newline="") as fh:
        return [
            TasrRecord(row["surrogate"], row["victim"], row["method"], row["loss"], int(row["iters"]),
                       int(row["n"]), int(row["successes"]))
            for row in csv.DictReader(fh)
        ]


def plot_distributions(stats: dict[str, DistributionStats], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, s in stats.items():
        ax.plot(s.sorted_channel_means, lw=0.8, label=f"{label} (mean {s.mean:.2f}, var {s.variance:.2f})")
    ax.set_xlabel("channel (sorted by final-layer weight)")
    ax.set_ylabel("average output")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tasr_curves(records: list[TasrRecord], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    series: dict[tuple, list] = {}
    for r in records:
        series.setdefault((r.method, r.victim), []).append((r.iterations, r.tasr_percent))
    for (method, victim), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{method} -> {victim}")
    ax.set_xlabel("iterations")
    ax.set_ylabel("TASR (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
