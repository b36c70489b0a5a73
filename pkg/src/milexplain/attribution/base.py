"""Attribution result container, per-method config types, uniform dispatch,
and result-file serialization.

A result file is a pair: ``<stem>.npz`` holding the per-instance float maps
and ``<stem>.meta.json`` holding the metadata block. Metadata JSON is written
canonically (sorted keys) so identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ShapeError

METHODS = ("gradcam", "lrp", "iba", "input_iba")


@dataclass
class AttributionResult:
    method: str
    target_class: int
    maps: np.ndarray            # (N, H, W) float, one map per bag instance
    signed: bool
    metadata: dict

    def validate_against(self, num_instances: int, spatial: tuple[int, int]) -> None:
        if self.maps.shape != (num_instances, *spatial):
            raise ShapeError(
                f"maps shape {self.maps.shape} does not match "
                f"({num_instances}, {spatial[0]}, {spatial[1]})"
            )
        if not self.signed and self.maps.min() < 0:
            raise ShapeError(f"{self.method} maps must be non-negative")


@dataclass
class GradCAMConfig:
    layer_name: str = "block2"


@dataclass
class LRPRuleAssignment:
    """Composite rule map: ZBox on the first conv layer, gamma through the
    per-instance feature extractor, epsilon on attention pooling and the
    classifier."""

    zbox_low: float = 0.0
    zbox_high: float = 1.0
    gamma: float = 0.25
    epsilon: float = 0.01

    def validate(self) -> None:
        if self.zbox_low > self.zbox_high:
            raise ConfigurationError("zbox_low must be <= zbox_high")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")


def save_result(result: AttributionResult, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    npz_path = stem.with_suffix(".npz")
    meta_path = stem.with_suffix(".meta.json")
    np.savez(npz_path, maps=result.maps.astype(np.float32))
    meta = {
        "method": result.method,
        "target_class": result.target_class,
        "signed": result.signed,
        "metadata": result.metadata,
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return npz_path, meta_path


def load_result(stem: str | Path) -> AttributionResult:
    stem = Path(stem)
    with np.load(stem.with_suffix(".npz")) as z:
        maps = z["maps"]
    with open(stem.with_suffix(".meta.json")) as f:
        meta = json.load(f)
    return AttributionResult(
        method=meta["method"],
        target_class=meta["target_class"],
        maps=maps,
        signed=meta["signed"],
        metadata=meta["metadata"],
    )


def explain(model, bag, target_class: int, method: str,
            method_config=None) -> AttributionResult:
    """Uniform dispatch over the four attribution methods."""
    from .gradcam import gradcam
    from .iba import IBAConfig, iba
    from .input_iba import InputIBAConfig, input_iba
    from .lrp import lrp

    if method == "gradcam":
        cfg = method_config if method_config is not None else GradCAMConfig()
        if not isinstance(cfg, GradCAMConfig):
            raise ConfigurationError(f"gradcam expects GradCAMConfig, got {type(cfg).__name__}")
        return gradcam(model, bag, target_class, cfg.layer_name)
    if method == "lrp":
        cfg = method_config if method_config is not None else LRPRuleAssignment()
        if not isinstance(cfg, LRPRuleAssignment):
            raise ConfigurationError(f"lrp expects LRPRuleAssignment, got {type(cfg).__name__}")
        return lrp(model, bag, target_class, cfg)
    if method == "iba":
        if not isinstance(method_config, IBAConfig):
            raise ConfigurationError("iba expects a calibrated IBAConfig")
        return iba(model, bag, target_class, method_config)
    if method == "input_iba":
        if not isinstance(method_config, InputIBAConfig):
            raise ConfigurationError("input_iba expects an InputIBAConfig")
        return input_iba(model, bag, target_class, method_config)
    raise ConfigurationError(f"unknown attribution method {method!r}")
