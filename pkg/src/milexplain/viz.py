"""Rendering: attribution overlays, perturbation-curve plots, ROAR plots,
confusion-matrix images.

Overlays are composed directly with Pillow from arrays so that re-rendering
the same attribution file is byte-identical. Signed maps use a diverging
colormap centered at zero; non-negative maps a sequential one. The blend
alpha is 0.6 at maximum |value| and scales with magnitude, so an all-zero
map reproduces the original image exactly.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import colormaps
from PIL import Image

from .attribution.base import AttributionResult
from .data import Bag


def render_overlay(pixels: np.ndarray, amap: np.ndarray, signed: bool) -> np.ndarray:
    """Blend one attribution map over one (3, H, W) instance image.

    Returns an (H, W, 3) uint8 array.
    """
    img = np.round(pixels.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    peak = float(np.abs(amap).max())
    if peak == 0.0:
        return img
    norm = amap / peak
    if signed:
        colored = colormaps["bwr"](0.5 + 0.5 * norm)[..., :3]
    else:
        colored = colormaps["jet"](norm)[..., :3]
    gray = (img.astype(np.float64) @ np.array([0.299, 0.587, 0.114]))[..., None]
    alpha = (0.6 * np.abs(norm))[..., None]
    out = (1.0 - alpha) * gray.repeat(3, axis=2) + alpha * colored * 255.0
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def save_overlays(result: AttributionResult, bag: Bag, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, inst in enumerate(bag.instances):
        arr = render_overlay(inst.pixels, result.maps[k], result.signed)
        path = out_dir / f"{inst.instance_id}_{result.method}.png"
        Image.fromarray(arr).save(path, format="PNG")
        paths.append(path)
    return paths


def plot_curves(curves: dict[str, list[tuple[float, float]]], title: str,
                xlabel: str, ylabel: str, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, points in curves.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_auc_bars(summary: dict[str, dict], path: str | Path) -> None:
    """Bar panel of mean insertion/deletion AUC per attribution method."""
    methods = list(summary.keys())
    modes = ["insertion", "deletion"]
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.35
    xs = np.arange(len(methods))
    for i, mode in enumerate(modes):
        means = [summary[m].get(mode, {}).get("mean_auc", np.nan) for m in methods]
        stds = [summary[m].get(mode, {}).get("std_auc", 0.0) for m in methods]
        ax.bar(xs + (i - 0.5) * width, means, width, yerr=stds, label=mode, capsize=3)
    ax.set_xticks(xs)
    ax.set_xticklabels(methods, rotation=20)
    ax.set_ylabel("mean AUC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_confusion_matrix(cm: np.ndarray, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(cm, cmap="Blues")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
