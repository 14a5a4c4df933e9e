"""Command-line entry point.

    swfd attack   --config run.toml [--override key=value ...] --output-dir out/
    swfd eval     --adv-dir out/ --output-dir eval/
    swfd saliency --image img.png --label 3 --output-dir sal/
    swfd stats    --adv-dir out/ [--adv-dir other/] --output-dir stats/
    swfd grid     --config grid.toml --workers 4 --output-dir grid/
    swfd toy-zoo  --output-dir zoo/

Exit codes: 1 configuration error, 2 model error, 3 runtime error.
Progress goes to stderr; tables and images go to files under ``--output-dir``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import json
import logging
import sys
from pathlib import Path

import torch

from swfd import toy
from swfd.config import ConfigError, RunConfig, load_config
from swfd.data import DataError, from_levels, load_dataset, load_image, save_image_lossless
from swfd.evaluation import (
    GridSpec,
    deep_layer_distribution,
    evaluate_tasr,
    load_results_dir,
    original_levels,
    plot_distributions,
    plot_tasr_curves,
    run_attacks,
    run_experiment_grid,
    save_results_dir,
    summarize,
    write_results,
)
from swfd.models import CHECKPOINT_ENV, ModelLoadError, RegistryError, load_model, load_registry
from swfd.saliency import salient_region

log = logging.getLogger("swfd")

EXIT_CONFIG, EXIT_MODEL, EXIT_RUNTIME = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args):
    try:
        return load_config(args.config, args.override or (), args.seed)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc


def _loader(cfg):
    try:
        registry = load_registry(cfg.resolve_path("model.registry"))
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read model registry: {exc}") from exc
    return functools.partial(load_model, registry=registry, checkpoint_dir=cfg.resolve_path("model.checkpoint_dir"))


def _model(load, name):
    try:
        return load(name)
    except (RegistryError, ModelLoadError) as exc:
        raise CliError(EXIT_MODEL, f"model {name!r}: {exc}") from exc


def _examples(cfg, num_categories: int, size: int | None):
    manifest = cfg.resolve_path("data.manifest")
    if manifest is None:
        raise CliError(EXIT_CONFIG, "config error: data.manifest is not set")
    try:
        _, examples = load_dataset(manifest, num_categories=num_categories, size=size, limit=cfg["data.limit"])
    except (DataError, OSError) as exc:
        raise CliError(EXIT_CONFIG, f"dataset {manifest}: {exc}") from exc
    return examples


def original_image(result):
    return from_levels(original_levels(result))


def _write_resolved(cfg, out_dir: Path, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = json.loads(cfg.to_json())
    payload.update(extra or {})
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _progress(label):
    def report(done, total):
        print(f"\r{label}: {done}/{total}", end="" if done < total else "\n", file=sys.stderr, flush=True)

    return report


def cmd_attack(args) -> int:
    cfg = _config(args)
    load = _loader(cfg)
    surrogate = _model(load, cfg["model.surrogate"])
    attack_cfg = cfg.attack_config(surrogate.wfd_depth)
    examples = _examples(cfg, surrogate.num_categories, surrogate.input_size)
    out = Path(args.output_dir)
    _write_resolved(cfg, out, {"attack": attack_cfg.to_dict()})
    try:
        results = run_attacks(surrogate, examples, attack_cfg, _progress("attack"))
    except Exception as exc:
        raise CliError(EXIT_RUNTIME, f"attack failed: {exc}") from exc
    save_results_dir(results, out, {"config": attack_cfg.to_dict(), "surrogate": surrogate.name})
    for r in results:
        sidecar = {
            "id": r.example_id,
            "surrogate": surrogate.name,
            "true_label": r.true_label,
            "target_label": r.target_label,
            "iterations": r.iterations_used,
            "linf_levels": int((r.perturbation.abs() * 255).round().max()) if r.perturbation.numel() else 0,
            "flags": list(r.flags),
            "seed": attack_cfg.seed,
            "config_digest": attack_cfg.digest(surrogate.name),
        }
        (out / f"{r.example_id}.json").write_text(json.dumps(sidecar, indent=2))
    log.info("wrote %d adversarial examples to %s", len(results), out)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    load = _loader(cfg)
    out = Path(args.output_dir)
    adv_dir = Path(args.adv_dir)
    _write_resolved(cfg, out, {"adv_dir": str(adv_dir)})
    meta_path = adv_dir / "meta.json"
    if not adv_dir.is_dir():
        raise CliError(EXIT_CONFIG, f"adversarial directory {adv_dir} does not exist")
    results = load_results_dir(adv_dir) if meta_path.is_file() else []
    meta = json.loads(meta_path.read_text()).get("meta", {}) if meta_path.is_file() else {}
    victims = args.victims or cfg["model.victims"]
    if not results:
        log.warning("no adversarial examples in %s; writing an empty table", adv_dir)
        write_results([], out / "results.csv", {"adv_dir": str(adv_dir)})
        return 0
    if not victims:
        raise CliError(EXIT_CONFIG, "config error: no victims given (model.victims or --victims)")
    config = meta.get("config", {})
    method = args.method or ("SWFD" if config.get("wfd") or config.get("use_salient_branch") else "DTMI")
    iters = sorted(set(int(k) for r in results for k in r.snapshots) | {results[0].iterations_used})
    records = []
    for name in victims:
        victim = _model(load, name).as_victim()
        for it in iters:
            try:
                records.append(evaluate_tasr(results, victim, surrogate=meta.get("surrogate", ""), method=method,
                                             loss_kind=config.get("loss_kind", ""), iteration=it))
            except Exception as exc:
                raise CliError(EXIT_RUNTIME, f"evaluation on {name} failed: {exc}") from exc
            log.info("%s @%d: %.1f%%", name, it, records[-1].tasr_percent)
    write_results(records, out / "results.csv", {"adv_dir": str(adv_dir), "meta": meta, "config": cfg.values})
    return 0


def cmd_saliency(args) -> int:
    cfg = _config(args)
    load = _loader(cfg)
    model = _model(load, cfg["model.surrogate"])
    out = Path(args.output_dir)
    _write_resolved(cfg, out, {"image": str(args.image), "label": args.label})
    try:
        x = load_image(args.image, model.input_size)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read image {args.image}: {exc}") from exc
    if not 0 <= args.label < model.num_categories:
        raise CliError(EXIT_CONFIG, f"label {args.label} outside [0, {model.num_categories})")
    attack_cfg = cfg.attack_config(model.wfd_depth)
    try:
        hm, region = salient_region(model, x, args.label, attack_cfg.epsilon_b, attack_cfg.cam_depth)
    except Exception as exc:
        raise CliError(EXIT_RUNTIME, f"saliency failed: {exc}") from exc
    stem = Path(args.image).stem
    heat = (hm.values * 255).round() / 255
    save_image_lossless(heat.expand(3, -1, -1), out / f"{stem}_heatmap.png")
    save_image_lossless(region.image, out / f"{stem}_salient.png")
    top, left, height, width = region.bbox
    (out / f"{stem}_bbox.json").write_text(json.dumps(
        {"top": top, "left": left, "height": height, "width": width, "fallback": region.fallback,
         "threshold": attack_cfg.epsilon_b, "layer": hm.source_layer.display_name if hm.source_layer else None},
        indent=2))
    return 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    load = _loader(cfg)
    model = _model(load, cfg["model.surrogate"])
    out = Path(args.output_dir)
    _write_resolved(cfg, out, {"adv_dirs": args.adv_dir})
    layer = model.layer(int(cfg["stats.depth_index"]))
    sets = {}
    for d in args.adv_dir:
        d = Path(d)
        if not (d / "meta.json").is_file():
            raise CliError(EXIT_CONFIG, f"{d} is not an attack output directory")
        label = d.name if d.name not in sets else f"{d.name}#{len(sets)}"
        sets[label] = load_results_dir(d)
    if args.clean:
        first = next(iter(sets.values()), [])
        sets["clean"] = [dataclasses.replace(r, adv_image=original_image(r),
                                             perturbation=torch.zeros_like(r.perturbation), snapshots={})
                         for r in first]
    summary = {}
    with open(out / "stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("set", "example_id", "class_index", "mean", "variance"))
        for label, results in sets.items():
            per_image = []
            for r in results:
                cls = args.class_index if args.class_index is not None else r.target_label
                try:
                    s = deep_layer_distribution(model, [r.adv_image], layer, cls)
                except Exception as exc:
                    raise CliError(EXIT_RUNTIME, f"statistics for {r.example_id} failed: {exc}") from exc
                writer.writerow((label, r.example_id, cls, f"{s.mean:.6g}", f"{s.variance:.6g}"))
                per_image.append(s.variance)
            if args.class_index is not None and results:
                summary[label] = deep_layer_distribution(model, [r.adv_image for r in results], layer, args.class_index)
            log.info("%s: mean per-image variance %.4g over %d images", label,
                     sum(per_image) / max(1, len(per_image)), len(per_image))
    if args.plot and summary:
        plot_distributions(summary, out / "distributions.png")
    return 0


def cmd_grid(args) -> int:
    cfg = _config(args)
    load = _loader(cfg)
    surrogate = _model(load, cfg["model.surrogate"])
    victims = tuple(cfg["model.victims"])
    for v in victims:
        _model(load, v)
    examples = _examples(cfg, surrogate.num_categories, surrogate.input_size)
    sweep = cfg["grid.sweep"]
    if isinstance(sweep, dict):
        sweep = [sweep]
    try:
        grid = GridSpec(
            surrogate=surrogate.name,
            victims=victims,
            methods=tuple(cfg["grid.methods"]),
            overrides=tuple(dict(o) for o in sweep),
            # keep the configured drop parameters; each method decides whether to use them
            base=RunConfig({**cfg.values, "wfd.enabled": True}, cfg.source).attack_config(surrogate.wfd_depth),
            ablation_loss=cfg["grid.ablation_loss"],
        )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc
    out = Path(args.output_dir)
    _write_resolved(cfg, out, {"grid": {"methods": grid.methods, "sweep": list(grid.overrides)}})
    errors: list = []
    records = run_experiment_grid(grid, examples, load, cache_dir=out / "cache", workers=args.workers, errors=errors)
    write_results(records, out / "results.csv", {"config": cfg.values, "failed_cells": [
        {"method": c.method, "overrides": c.overrides, "error": str(e)} for c, e in errors]})
    summary = summarize(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for method, tasr in summary.items():
        print(f"{method}\t{tasr:.1f}")
    if args.plot and records:
        plot_tasr_curves(records, out / "tasr_curves.png")
    if errors:
        log.error("%d grid cell(s) failed", len(errors))
        return EXIT_RUNTIME
    return 0


def cmd_toy_zoo(args) -> int:
    report = toy.build_zoo(args.output_dir, n_train=args.n_train, n_eval=args.n_eval,
                           epochs=args.epochs, seed=args.seed or 0)
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swfd",
        description=__doc__.split("\n\n")[0],
        epilog=f"Model weights are looked up in ${CHECKPOINT_ENV} (default ~/.cache/swfd).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output=True):
        p.add_argument("--config", type=Path, help="TOML configuration file")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. attack.max_iters=1 (repeatable)")
        p.add_argument("--seed", type=int, help="seed for every stochastic choice")
        if output:
            p.add_argument("--output-dir", required=True, type=Path)

    p = sub.add_parser("attack", help="craft adversarial examples on the surrogate")
    common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="score an attack output directory on black-box victims")
    common(p)
    p.add_argument("--adv-dir", required=True, type=Path)
    p.add_argument("--victims", nargs="+", help="victim model names (default: model.victims)")
    p.add_argument("--method", help="method label for the results table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="heatmap, salient region and bounding box for one image")
    common(p)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--label", required=True, type=int, help="class whose evidence is mapped")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("stats", help="deep-layer channel distribution of attack outputs")
    common(p)
    p.add_argument("--adv-dir", required=True, action="append", help="attack output directory (repeatable)")
    p.add_argument("--clean", action="store_true", help="also report the clean images of the first directory")
    p.add_argument("--class-index", type=int, help="sort by this class instead of each example's target")
    p.add_argument("--plot", action="store_true", help="write distributions.png (needs --class-index)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("grid", help="attack and evaluate a method x hyperparameter grid")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="write tasr_curves.png")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("toy-zoo", help="train the small synthetic-data models used by the tests")
    p.add_argument("--output-dir", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=6000)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--epochs", type=int, default=6)
    p.set_defaults(func=cmd_toy_zoo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (ModelLoadError, RegistryError) as exc:
        log.error("model error: %s", exc)
        return EXIT_MODEL
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
