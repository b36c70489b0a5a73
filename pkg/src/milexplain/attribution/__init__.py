from .base import (AttributionResult, GradCAMConfig, LRPRuleAssignment,
                   METHODS, explain, load_result, save_result)
from .gradcam import gradcam
from .iba import IBAConfig, NoiseStats, estimate_noise_stats, iba
from .input_iba import InputIBAConfig, input_iba
from .lrp import dense_network_lrp, linear_relevance, lrp

__all__ = [
    "AttributionResult", "GradCAMConfig", "IBAConfig", "InputIBAConfig",
    "LRPRuleAssignment", "METHODS", "NoiseStats", "dense_network_lrp",
    "estimate_noise_stats", "explain", "gradcam", "iba", "input_iba",
    "linear_relevance", "load_result", "lrp", "save_result",
]
