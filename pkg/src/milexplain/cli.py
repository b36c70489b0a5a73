"""Command-line orchestration: generate, train, explain, bench.

Configs are YAML files with a top-level schema_version and one section per
command. Every artifact directory gets a provenance.json carrying the
SHA-256 digests of the config used (and the checkpoint, where one is
involved). Exit codes: 0 success, 1 usage/config error, 2 data error,
3 runtime failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import bench as benchmod
from .attribution.base import (AttributionResult, GradCAMConfig,
                               LRPRuleAssignment, METHODS, explain,
                               save_result)
from .attribution.iba import IBAConfig, estimate_noise_stats
from .attribution.input_iba import InputIBAConfig
from .data import (Dataset, SynthConfig, generate_synthetic, load_dataset,
                   save_dataset, stratified_split)
from .errors import ConfigurationError, DataError, MilexplainError
from .metrics import MetricsReport
from .model import MILModel, checkpoint_digest, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, train
from .viz import (plot_auc_bars, plot_confusion_matrix, plot_curves,
                  save_overlays)

CONFIG_VERSION = 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path: str, section: str) -> tuple[dict, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    with open(p) as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a YAML mapping")
    version = cfg.get("schema_version")
    if version != CONFIG_VERSION:
        raise ConfigurationError(
            f"config schema_version must be {CONFIG_VERSION}, got {version}"
        )
    if section not in cfg:
        raise ConfigurationError(f"config is missing the {section!r} section")
    return cfg[section], _sha256(p)


def _out_dir(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_provenance(out: Path, **digests) -> None:
    with open(out / "provenance.json", "w") as f:
        json.dump(digests, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(section: dict, key: str):
    if key not in section:
        raise ConfigurationError(f"config field {key!r} is required")
    return section[key]


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(1)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(2)
        except MilexplainError as exc:
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
def main() -> None:
    """Train and explain attention-MIL models on synthetic bag datasets."""


common_options = [
    click.option("--config", "config_path", required=True, type=str,
                 help="YAML config file"),
    click.option("--seed", type=int, default=None, help="override rng seed"),
    click.option("--out", required=True, type=str, help="output directory"),
    click.option("--force", is_flag=True, help="overwrite existing outputs"),
    click.option("--jobs", type=int, default=1, help="worker threads"),
]


def _with_common(fn):
    for opt in reversed(common_options):
        fn = opt(fn)
    return _handle_errors(fn)


@main.command()
@_with_common
def generate(config_path, seed, out, force, jobs):
    """Generate a synthetic dataset directory with ground-truth masks."""
    section, digest = _load_config(config_path, "generate")
    torch.set_num_threads(max(1, jobs))
    known = {f for f in SynthConfig.__dataclass_fields__}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"unknown generate fields: {sorted(unknown)}")
    cfg = SynthConfig(**section)
    if seed is not None:
        cfg.rng_seed = seed
    dataset = generate_synthetic(cfg)
    out_path = Path(out)
    save_dataset(dataset, out_path, force=force)
    _write_provenance(out_path, config_digest=digest, rng_seed=cfg.rng_seed)
    click.echo(f"wrote {len(dataset.bags)} bags to {out}")


def _train_cfg_from(section: dict, seed: int | None) -> TrainConfig:
    fields = {k: section[k] for k in TrainConfig.__dataclass_fields__ if k in section}
    cfg = TrainConfig(**fields)
    if seed is not None:
        cfg.rng_seed = seed
    return cfg


def _write_log(log: list[dict], path: Path) -> None:
    with open(path, "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


@main.command("train")
@_with_common
def train_cmd(config_path, seed, out, force, jobs):
    """Train the MIL model; with runs > 1, report mean/std across seeds."""
    section, digest = _load_config(config_path, "train")
    torch.set_num_threads(max(1, jobs))
    dataset = load_dataset(_require(section, "dataset"))
    ratios = tuple(section.get("ratios", (0.6, 0.2, 0.2)))
    cfg = _train_cfg_from(section, seed)
    runs = int(section.get("runs", 1))
    model_kwargs = section.get("model", {})
    out_path = _out_dir(out, force)
    train_set, val_set, test_set = stratified_split(dataset, ratios, cfg.rng_seed)

    reports: list[MetricsReport] = []
    best_val, best_ckpt = float("inf"), None
    for run in range(runs):
        run_cfg = TrainConfig(**{**cfg.__dict__, "rng_seed": cfg.rng_seed + run})
        torch.manual_seed(run_cfg.rng_seed)
        model = MILModel(num_classes=dataset.num_classes, **model_kwargs)
        model, log = train(model, train_set, val_set, run_cfg)
        ckpt = save_checkpoint(model, out_path / f"checkpoint_run{run}.pt")
        _write_log(log, out_path / f"train_log_run{run}.jsonl")
        report = evaluate(model, test_set)
        report.save(out_path / f"metrics_run{run}.json",
                    extra={"config_digest": digest,
                           "checkpoint_digest": checkpoint_digest(ckpt)})
        reports.append(report)
        run_best = min(e["val_loss"] for e in log)
        if run_best < best_val:
            best_val, best_ckpt = run_best, ckpt

    (out_path / "checkpoint.pt").write_bytes(best_ckpt.read_bytes())
    scalar = {"accuracy": [r.accuracy for r in reports],
              "macro_f1": [r.macro_f1 for r in reports],
              "auroc": [r.auroc for r in reports]}
    summary = {
        "runs": runs,
        "config_digest": digest,
        "checkpoint_digest": checkpoint_digest(out_path / "checkpoint.pt"),
        "mean": {k: float(np.mean(v)) for k, v in scalar.items()},
        "std": {k: float(np.std(v)) for k, v in scalar.items()},
    }
    with open(out_path / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    plot_confusion_matrix(reports[0].confusion_matrix,
                          out_path / "confusion_matrix.png")
    _write_provenance(out_path, config_digest=digest,
                      checkpoint_digest=summary["checkpoint_digest"])
    click.echo(f"test accuracy (mean over {runs} runs): "
               f"{summary['mean']['accuracy']:.4f}")


def _method_config(method: str, section: dict, model, dataset: Dataset):
    params = dict(section.get("method_config", {}))
    if method == "gradcam":
        return GradCAMConfig(**params)
    if method == "lrp":
        return LRPRuleAssignment(**params)
    calibration = int(section.get("calibration_bags", 8))
    deep_params = {k: v for k, v in params.items()
                   if k in IBAConfig.__dataclass_fields__}
    deep = IBAConfig(**deep_params)
    deep.noise_stats = estimate_noise_stats(
        model, dataset.bags[:calibration], deep.bottleneck_layer)
    if method == "iba":
        return deep
    rest = {k: v for k, v in params.items()
            if k in InputIBAConfig.__dataclass_fields__ and k != "deep_bottleneck"}
    return InputIBAConfig(deep_bottleneck=deep, **rest)


def _select_bags(dataset: Dataset, selector) -> list:
    if selector in (None, "all"):
        return dataset.bags
    wanted = set(selector if isinstance(selector, list) else [selector])
    chosen = [b for b in dataset.bags if b.bag_id in wanted]
    missing = wanted - {b.bag_id for b in chosen}
    if missing:
        raise DataError(f"bags not in dataset: {sorted(missing)}")
    return chosen


@main.command("explain")
@_with_common
def explain_cmd(config_path, seed, out, force, jobs):
    """Compute attribution files and overlay images for selected bags."""
    section, digest = _load_config(config_path, "explain")
    torch.set_num_threads(max(1, jobs))
    ckpt_path = Path(_require(section, "checkpoint"))
    model = load_checkpoint(ckpt_path)
    dataset = load_dataset(_require(section, "dataset"))
    method = _require(section, "method")
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r} (choose from {METHODS})")
    bags = _select_bags(dataset, section.get("bags"))
    method_cfg = _method_config(method, section, model, dataset)
    out_path = _out_dir(out, force)
    ckpt_digest = checkpoint_digest(ckpt_path)
    failed = 0
    for bag in bags:
        try:
            result = explain(model, bag, bag.label, method, method_cfg)
        except MilexplainError as exc:
            click.echo(f"{bag.bag_id}: {method} failed: {exc}", err=True)
            failed += 1
            continue
        result.metadata.update(config_digest=digest, checkpoint_digest=ckpt_digest)
        save_result(result, out_path / f"{bag.bag_id}_{method}")
        save_overlays(result, bag, out_path / "overlays" / bag.bag_id)
    _write_provenance(out_path, config_digest=digest, checkpoint_digest=ckpt_digest)
    click.echo(f"explained {len(bags) - failed}/{len(bags)} bags with {method}")


@main.command("bench")
@_with_common
def bench_cmd(config_path, seed, out, force, jobs):
    """Run insertion/deletion and/or ROAR benchmarks; write tables and plots."""
    section, digest = _load_config(config_path, "bench")
    torch.set_num_threads(max(1, jobs))
    ckpt_path = Path(_require(section, "checkpoint"))
    model = load_checkpoint(ckpt_path)
    dataset = load_dataset(_require(section, "dataset"))
    methods = section.get("methods", ["gradcam"])
    metrics = section.get("metrics", ["insertion", "deletion"])
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}")
    steps = int(section.get("curve_steps", 20))
    max_bags = section.get("max_bags")
    eval_set = Dataset(bags=dataset.bags[:max_bags] if max_bags else dataset.bags,
                       num_classes=dataset.num_classes, split_tag=dataset.split_tag)
    out_path = _out_dir(out, force)
    ckpt_digest = checkpoint_digest(ckpt_path)

    curve_modes = tuple(m for m in ("insertion", "deletion") if m in metrics)
    summary: dict = {"config_digest": digest, "checkpoint_digest": ckpt_digest,
                     "methods": {}}
    if curve_modes:
        for method in methods:
            method_cfg = _method_config(method, section, model, dataset)
            provider = lambda bag, _m=method, _c=method_cfg: explain(
                model, bag, bag.label, _m, _c)
            agg = benchmod.aggregate_auc(
                model, eval_set, provider, steps=steps,
                cache_dir=out_path / "cache" / method, modes=curve_modes)
            summary["methods"][method] = agg
        with open(out_path / "auc_table.csv", "w") as f:
            f.write("method,mode,mean_auc,std_auc,num_bags\n")
            for method, agg in summary["methods"].items():
                for mode in curve_modes:
                    f.write(f"{method},{mode},{agg[mode]['mean_auc']:.6f},"
                            f"{agg[mode]['std_auc']:.6f},{agg['num_bags'][mode]}\n")
        plot_auc_bars(summary["methods"], out_path / "auc_bars.png")

    if "roar" in metrics:
        if "train" not in section:
            raise ConfigurationError(
                "roar requires a 'train' subsection (split ratios and training config)"
            )
        tsec = section["train"]
        ratios = tuple(tsec.get("ratios", (0.6, 0.2, 0.2)))
        train_cfg = _train_cfg_from(tsec, seed)
        splits = stratified_split(dataset, ratios, train_cfg.rng_seed)
        percentages = section.get("roar_percentages", [10, 30, 50, 70, 90])
        providers = {}
        for method in methods:
            method_cfg = _method_config(method, section, model, dataset)
            providers[method] = lambda bag, _m=method, _c=method_cfg: explain(
                model, bag, bag.label, _m, _c).maps
        report = benchmod.roar(splits, providers, percentages, train_cfg,
                               seeds=tuple(section.get("roar_seeds", (0, 1, 2))),
                               model_kwargs=tsec.get("model", {}))
        report.save(out_path / "roar_report.json")
        plot_curves(report.curves, "ROAR", "% pixels removed",
                    "retrained test accuracy", out_path / "roar.png")
        summary["roar_baseline_accuracy"] = report.baseline_accuracy

    with open(out_path / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_provenance(out_path, config_digest=digest, checkpoint_digest=ckpt_digest)
    click.echo(f"benchmark artifacts written to {out}")


if __name__ == "__main__":
    main()
