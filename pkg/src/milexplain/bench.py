"""Quantitative faithfulness benchmark: insertion/deletion perturbation
curves with trapezoidal AUC, Remove-and-Retrain (ROAR), and ground-truth
localization scores.

Pixels of a bag are ranked jointly across all instances by attribution
value, descending, with ties broken by (instance index, pixel index). The
perturbation baseline is zero in normalized input space, and the tracked
score is the model probability of the bag's true class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attribution.base import AttributionResult
from .data import Bag, Dataset, copy_with_pixels
from .errors import ConfigurationError, ShapeError
from .model import MILModel
from .train import TrainConfig, evaluate, train


@dataclass
class PerturbationCurve:
    points: list[tuple[float, float]]   # (fraction, score), fractions 0 -> 1
    auc: float
    mode: str                            # "insertion" or "deletion"

    def validate(self) -> None:
        fracs = [p[0] for p in self.points]
        if fracs[0] != 0.0 or fracs[-1] != 1.0 or any(
                b <= a for a, b in zip(fracs, fracs[1:])):
            raise ShapeError("fractions must increase strictly from 0 to 1")
        if abs(self.auc - trapezoid_auc(self.points)) > 1e-9:
            raise ShapeError("stored auc disagrees with trapezoid recomputation")


@dataclass
class RoarReport:
    # method name (incl. "random") -> list of (removal_percentage, accuracy)
    curves: dict[str, list[tuple[float, float]]]
    baseline_accuracy: float
    failures: list[str] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(
                {"curves": self.curves, "baseline_accuracy": self.baseline_accuracy,
                 "failures": self.failures},
                f, indent=2, sort_keys=True)
            f.write("\n")


def trapezoid_auc(points: list[tuple[float, float]]) -> float:
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    return float(np.trapezoid(ys, xs))


def pixel_ranking(maps: np.ndarray) -> np.ndarray:
    """Flat indices into (N, H, W) ordered by attribution value descending.

    Ties broken by instance index then pixel index (stable sort over the
    instance-major flattening).
    """
    flat = maps.reshape(-1)
    return np.argsort(-flat, kind="stable")


def _true_class_prob(model, pixels: np.ndarray, label: int) -> float:
    probs = model.bag_probs(pixels.astype(np.float32))
    if isinstance(probs, torch.Tensor):
        probs = probs.numpy()
    return float(probs[label])


def _perturbation_curve(model, bag: Bag, result: AttributionResult,
                        steps: int, mode: str) -> PerturbationCurve:
    pixels = bag.pixel_array()
    n, _, h, w = pixels.shape
    if result.maps.shape != (n, h, w):
        raise ShapeError(
            f"maps shape {result.maps.shape} does not align with bag "
            f"({n}, {h}, {w})"
        )
    order = pixel_ranking(result.maps)
    total = order.size
    baseline = np.zeros_like(pixels)
    fractions = np.linspace(0.0, 1.0, steps + 1)
    points = []
    for frac in fractions:
        k = int(round(frac * total))
        chosen = order[:k]
        inst = chosen // (h * w)
        row = (chosen % (h * w)) // w
        col = chosen % w
        if mode == "insertion":
            perturbed = baseline.copy()
            perturbed[inst, :, row, col] = pixels[inst, :, row, col]
        else:
            perturbed = pixels.copy()
            perturbed[inst, :, row, col] = 0.0
        points.append((float(frac), _true_class_prob(model, perturbed, bag.label)))
    return PerturbationCurve(points=points, auc=trapezoid_auc(points), mode=mode)


def insertion_curve(model, bag: Bag, result: AttributionResult,
                    steps: int = 20) -> PerturbationCurve:
    """Reveal top-attributed pixels into an all-zeros bag, tracking the
    true-class probability."""
    return _perturbation_curve(model, bag, result, steps, "insertion")


def deletion_curve(model, bag: Bag, result: AttributionResult,
                   steps: int = 20) -> PerturbationCurve:
    """Zero out top-attributed pixels of the original bag, tracking the
    true-class probability."""
    return _perturbation_curve(model, bag, result, steps, "deletion")


def aggregate_auc(model, dataset: Dataset, attribution_provider, steps: int = 20,
                  cache_dir: str | Path | None = None,
                  modes: tuple[str, ...] = ("insertion", "deletion")) -> dict:
    """Mean and std of per-bag curve AUCs over a dataset.

    `attribution_provider` maps a Bag to an AttributionResult. Per-bag
    failures are recorded and skipped. When `cache_dir` is set, per-bag
    curves are written there and reused on the next call.
    """
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    aucs: dict[str, list[float]] = {m: [] for m in modes}
    failures = []
    fns = {"insertion": insertion_curve, "deletion": deletion_curve}
    for bag in dataset.bags:
        cache_file = cache / f"{bag.bag_id}.json" if cache else None
        if cache_file and cache_file.exists():
            with open(cache_file) as f:
                stored = json.load(f)
            for m in modes:
                aucs[m].append(stored[m]["auc"])
            continue
        try:
            result = attribution_provider(bag)
            curves = {m: fns[m](model, bag, result, steps) for m in modes}
        except Exception as exc:  # noqa: BLE001 - per-bag isolation is the contract
            failures.append(f"{bag.bag_id}: {exc}")
            continue
        for m in modes:
            aucs[m].append(curves[m].auc)
        if cache_file:
            with open(cache_file, "w") as f:
                json.dump({m: {"auc": c.auc, "points": c.points}
                           for m, c in curves.items()}, f, sort_keys=True)
    out = {"failures": failures, "num_bags": {m: len(aucs[m]) for m in modes}}
    for m in modes:
        arr = np.array(aucs[m])
        out[m] = {
            "mean_auc": float(arr.mean()) if arr.size else math.nan,
            "std_auc": float(arr.std()) if arr.size else math.nan,
        }
    return out


def remove_top_pixels(dataset: Dataset, maps_by_bag: dict[str, np.ndarray],
                      percentage: float) -> Dataset:
    """Copy of the dataset with the top percentage of ranked pixels zeroed,
    per-bag global ranking."""
    bags = []
    for bag in dataset.bags:
        pixels = bag.pixel_array().copy()
        n, _, h, w = pixels.shape
        order = pixel_ranking(maps_by_bag[bag.bag_id])
        k = int(round(percentage / 100.0 * order.size))
        chosen = order[:k]
        inst = chosen // (h * w)
        row = (chosen % (h * w)) // w
        col = chosen % w
        pixels[inst, :, row, col] = 0.0
        bags.append(copy_with_pixels(bag, pixels))
    return Dataset(bags=bags, num_classes=dataset.num_classes,
                   split_tag=dataset.split_tag)


def _retrain_accuracy(train_set: Dataset, val_set: Dataset, test_set: Dataset,
                      train_cfg: TrainConfig, seed: int,
                      model_kwargs: dict) -> float:
    cfg = TrainConfig(**{**train_cfg.__dict__, "rng_seed": seed})
    torch.manual_seed(seed)
    model = MILModel(num_classes=train_set.num_classes, **model_kwargs)
    model, _ = train(model, train_set, val_set, cfg)
    return evaluate(model, test_set).accuracy


def roar(splits: tuple[Dataset, Dataset, Dataset],
         providers: dict[str, "callable"],
         percentages: list[float], train_cfg: TrainConfig,
         seeds: tuple[int, ...] = (0, 1, 2),
         model_kwargs: dict | None = None,
         include_random: bool = True) -> RoarReport:
    """Remove-and-Retrain over attribution providers.

    `providers` maps method name -> callable(Bag) -> (N, H, W) map array,
    computed from a single reference model. For each percentage, the top
    pixels are zeroed in all three splits and a model is retrained from
    scratch per seed; reported accuracy is the seed average on the modified
    test split. A random-ranking baseline runs through the same pipeline.
    """
    train_set, val_set, test_set = splits
    model_kwargs = model_kwargs or {}
    failures: list[str] = []

    baseline_accs = [
        _retrain_accuracy(train_set, val_set, test_set, train_cfg, s, model_kwargs)
        for s in seeds
    ]
    baseline = float(np.mean(baseline_accs))

    all_providers = dict(providers)
    if include_random:
        def random_maps(bag: Bag, _rng=np.random.default_rng(train_cfg.rng_seed)):
            shape = (bag.size, *bag.instances[0].pixels.shape[1:])
            return _rng.random(shape)

        all_providers["random"] = random_maps

    curves: dict[str, list[tuple[float, float]]] = {}
    for name, provider in all_providers.items():
        maps_by_bag = {}
        for split in splits:
            for bag in split.bags:
                maps_by_bag[bag.bag_id] = np.asarray(provider(bag))
        points = []
        for p in percentages:
            if p == 0:
                points.append((0.0, baseline))
                continue
            mod_splits = [remove_top_pixels(s, maps_by_bag, p) for s in splits]
            accs = []
            for s in seeds:
                try:
                    accs.append(_retrain_accuracy(*mod_splits, train_cfg, s,
                                                  model_kwargs))
                except Exception as exc:  # noqa: BLE001 - per-cell isolation
                    failures.append(f"{name}@{p}% seed {s}: {exc}")
            if accs:
                points.append((float(p), float(np.mean(accs))))
        curves[name] = points
    return RoarReport(curves=curves, baseline_accuracy=baseline, failures=failures)


def localization_score(result: AttributionResult, bag: Bag) -> list[dict]:
    """Pointing-game hit and in-mask mass fraction per masked instance.

    Instances without a ground-truth mask are reported with skipped=True.
    An all-zero map yields NaN mass fraction.
    """
    scores = []
    for k, inst in enumerate(bag.instances):
        mask = inst.ground_truth_mask
        if mask is None:
            scores.append({"instance_id": inst.instance_id, "skipped": True})
            continue
        m = result.maps[k]
        if m.shape != mask.shape:
            raise ShapeError(
                f"map shape {m.shape} does not match mask {mask.shape} "
                f"for instance {inst.instance_id}"
            )
        total = float(m.sum())
        hit = bool(mask.reshape(-1)[int(np.argmax(m))])
        mass = float(m[mask].sum() / total) if total != 0.0 else math.nan
        scores.append({
            "instance_id": inst.instance_id,
            "skipped": False,
            "pointing_hit": hit,
            "mass_fraction": mass,
        })
    return scores
