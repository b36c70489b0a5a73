"""Attention-MIL classification with pixel-level attribution and a
faithfulness benchmark on synthetic bags with known discriminative pixels."""

from .attribution.base import (AttributionResult, GradCAMConfig,
                               LRPRuleAssignment, explain, load_result,
                               save_result)
from .attribution.gradcam import gradcam
from .attribution.iba import IBAConfig, NoiseStats, estimate_noise_stats, iba
from .attribution.input_iba import InputIBAConfig, input_iba
from .attribution.lrp import dense_network_lrp, linear_relevance, lrp
from .bench import (PerturbationCurve, RoarReport, aggregate_auc,
                    deletion_curve, insertion_curve, localization_score,
                    roar, trapezoid_auc)
from .data import (Bag, Dataset, Instance, SynthConfig, decide_label,
                   generate_synthetic, load_dataset, save_dataset,
                   stratified_split)
from .metrics import MetricsReport, compute_metrics
from .model import (BagOutput, MILModel, attention_pool, load_checkpoint,
                    save_checkpoint)
from .train import TrainConfig, EarlyStopper, evaluate, train

__all__ = [
    "AttributionResult", "Bag", "BagOutput", "Dataset", "EarlyStopper",
    "GradCAMConfig", "IBAConfig", "InputIBAConfig", "Instance",
    "LRPRuleAssignment", "MILModel", "MetricsReport", "NoiseStats",
    "PerturbationCurve", "RoarReport", "SynthConfig", "TrainConfig",
    "aggregate_auc", "attention_pool", "compute_metrics", "decide_label",
    "deletion_curve", "dense_network_lrp", "estimate_noise_stats", "evaluate",
    "explain", "generate_synthetic", "gradcam", "iba", "input_iba",
    "insertion_curve", "linear_relevance", "load_checkpoint", "load_dataset",
    "load_result", "localization_score", "lrp", "roar", "save_checkpoint",
    "save_dataset", "save_result", "stratified_split", "train",
    "trapezoid_auc",
]
