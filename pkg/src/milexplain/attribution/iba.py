"""Information bottleneck attribution for MIL bags.

A per-feature mask lambda in [0, 1] (sigmoid parameterized) blends the layer
activation F with noise drawn from Q = Normal(mean, var) estimated per
feature element from calibration bags: Z = lambda*F + (1-lambda)*eps.
The mask minimizes beta * L_I + CE(target), where L_I is the closed-form
KL divergence of P(Z|F) from Q averaged over elements. The optimized mask,
averaged over channels and upsampled, is the attribution map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from ..errors import ConfigurationError, OptimizationError
from ..model import bag_to_tensor
from .base import AttributionResult

_MIN_STD = 1e-5
_SMOOTH_SIGMA = 1.0


@dataclass
class NoiseStats:
    mean: torch.Tensor  # (C, h, w)
    std: torch.Tensor   # (C, h, w), floored away from zero


@dataclass
class IBAConfig:
    bottleneck_layer: str = "block1"
    beta: float = 10.0
    optimization_steps: int = 600
    mask_learning_rate: float = 0.1
    mask_init_logit: float = -2.0
    rng_seed: int = 0
    noise_stats: NoiseStats | None = None

    def validate(self) -> None:
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.optimization_steps < 1:
            raise ConfigurationError("optimization_steps must be >= 1")
        if self.mask_learning_rate <= 0:
            raise ConfigurationError("mask_learning_rate must be positive")


def estimate_noise_stats(model, bags, layer_name: str = "block1") -> NoiseStats:
    """Per-element mean/std of the layer activation over calibration instances."""
    if not bags:
        raise ConfigurationError("noise_stats calibration needs at least one bag")
    feats = []
    model.eval()
    with torch.no_grad():
        for bag in bags:
            with model.capture([layer_name]) as acts:
                model(bag_to_tensor(bag))
            feats.append(acts[layer_name])
    stacked = torch.cat(feats, dim=0)
    mean = stacked.mean(dim=0)
    std = stacked.std(dim=0, unbiased=False).clamp(min=_MIN_STD)
    return NoiseStats(mean=mean, std=std)


def information_loss(lam: torch.Tensor, feats: torch.Tensor,
                     stats: NoiseStats) -> torch.Tensor:
    """Closed-form KL(P(Z|F) || Q) per element, averaged.

    P(Z|F) = Normal(lam*F + (1-lam)*mu, (1-lam)^2 sigma^2), Q = Normal(mu, sigma^2).
    Zero exactly at lam = 0.
    """
    keep = (1.0 - lam).clamp(min=1e-6)
    var_ratio = keep ** 2
    mean_shift = lam * (feats - stats.mean) / stats.std
    kl = -torch.log(keep) + 0.5 * (var_ratio + mean_shift ** 2) - 0.5
    return kl.mean()


def bottleneck_forward(model, x: torch.Tensor, layer_name: str,
                       lam: torch.Tensor, stats: NoiseStats,
                       noise: torch.Tensor | None = None) -> torch.Tensor:
    """Bag logits with the layer activation replaced by lam*F + (1-lam)*noise."""
    def hook(module, inputs, output):
        eps = noise if noise is not None else (
            stats.mean + stats.std * torch.randn_like(output)
        )
        return lam * output + (1.0 - lam) * eps

    handle = model.registry[layer_name].register_forward_hook(hook)
    try:
        logits, *_ = model(x)
    finally:
        handle.remove()
    return logits


def optimize_bottleneck_mask(model, x: torch.Tensor, target_class: int,
                             cfg: IBAConfig) -> tuple[torch.Tensor, dict]:
    """Optimize the per-feature mask for one bag; returns (lambda, diagnostics)."""
    cfg.validate()
    if cfg.noise_stats is None:
        raise ConfigurationError(
            "noise_stats must be calibrated (estimate_noise_stats) before iba"
        )
    stats = cfg.noise_stats
    torch.manual_seed(cfg.rng_seed)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad(), model.capture([cfg.bottleneck_layer]) as acts:
            model(x)
            feats = acts[cfg.bottleneck_layer].detach()
        param = torch.full_like(feats, cfg.mask_init_logit, requires_grad=True)
        opt = torch.optim.Adam([param], lr=cfg.mask_learning_rate)
        target = torch.tensor([target_class])
        loss_val = None
        for step in range(cfg.optimization_steps):
            opt.zero_grad()
            lam = torch.sigmoid(param)
            logits = bottleneck_forward(model, x, cfg.bottleneck_layer, lam, stats)
            ce = F.cross_entropy(logits.unsqueeze(0), target)
            li = information_loss(lam, feats, stats)
            loss = cfg.beta * li + ce
            if not torch.isfinite(loss):
                raise OptimizationError(step)
            loss.backward()
            opt.step()
            loss_val = loss.item()
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    lam = torch.sigmoid(param).detach()
    return lam, {"final_loss": loss_val, "mask_mean": lam.mean().item()}


def iba(model, bag, target_class: int, cfg: IBAConfig) -> AttributionResult:
    x = bag_to_tensor(bag)
    lam, diag = optimize_bottleneck_mask(model, x, target_class, cfg)
    per_instance = lam.mean(dim=1, keepdim=True)  # (N, 1, h, w)
    maps = F.interpolate(per_instance, size=x.shape[2:], mode="bilinear",
                         align_corners=False)[:, 0].numpy().astype(np.float64)
    # the per-cell mask is blocky after upsampling; a light blur moves the
    # peak to the center of mass of the kept region instead of a cell corner
    maps = np.stack([gaussian_filter(m, _SMOOTH_SIGMA) for m in maps])
    return AttributionResult(
        method="iba",
        target_class=target_class,
        maps=maps,
        signed=False,
        metadata={
            "bottleneck_layer": cfg.bottleneck_layer,
            "beta": cfg.beta,
            "optimization_steps": cfg.optimization_steps,
            "mask_learning_rate": cfg.mask_learning_rate,
            "mask_init_logit": cfg.mask_init_logit,
            **diag,
        },
    )
