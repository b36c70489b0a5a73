"""GradCAM adapted to MIL bags.

The gradient of the target-class bag logit is taken with respect to a conv
layer's per-instance feature maps, with the gradient flowing through the
attention pooling, so an instance's attention weight modulates its map.
Channel weights are the spatial mean of the gradient; the map is the
ReLU-ed weighted channel sum, bilinearly upsampled to instance size.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigurationError
from ..model import bag_to_tensor
from .base import AttributionResult


def gradcam(model, bag, target_class: int,
            layer_name: str = "block2") -> AttributionResult:
    if layer_name not in model.registry:
        raise ConfigurationError(f"layer {layer_name!r} not in model registry")
    x = bag_to_tensor(bag)
    model.eval()
    with torch.enable_grad(), model.capture([layer_name]) as acts:
        logits, *_ = model(x)
        act = acts[layer_name]
        if act.ndim != 4:
            raise ConfigurationError(
                f"layer {layer_name!r} has no spatial dimensions (shape {tuple(act.shape)})"
            )
        act.retain_grad()
        logits[target_class].backward()
    grad = act.grad
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)       # (N, C, 1, 1)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))  # (N, 1, h, w)
    cam = F.interpolate(cam, size=x.shape[2:], mode="bilinear", align_corners=False)
    maps = cam[:, 0].detach().numpy().astype(np.float64)
    return AttributionResult(
        method="gradcam",
        target_class=target_class,
        maps=maps,
        signed=False,
        metadata={"layer_name": layer_name},
    )
