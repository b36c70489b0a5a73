"""Layer-wise relevance propagation for the MIL model.

Composite rule assignment: ZBox on the first conv layer of every instance,
gamma through the lower feature blocks, epsilon on the attention pooling
and the classifier. The two deepest embedder stages (final residual block
and the embedding projection) use a fixed, strongly positive-emphasized
gamma: signed weights that deep in the network produce large cancelling
contributions, and redistributing along positive contributions is what
keeps the relevance focused on the evidence instead of smearing it across
the background. Propagation through conv/pool/residual stages uses the
standard gradient reformulation: with stabilized output contributions
s = R / (z + eps*sign(z)), input relevance is x * d/dx sum(z * s), which
reduces to the textbook rules on linear layers.

`linear_relevance` and `dense_network_lrp` are standalone single-rule
implementations on plain arrays, usable as oracles and on toy dense nets.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import PropagationError
from ..model import MILModel, attention_pool, bag_to_tensor
from .base import AttributionResult, LRPRuleAssignment

_GUARD = 1e-12
# The two deepest embedder stages redistribute along a strongly
# positive-emphasized version of their weights. Signed weights that deep in
# the network produce large cancelling contributions; mild gamma there lets
# the cancellation smear relevance across the background.
_DEEP_GAMMA = 10.0
# Stabilizer used on every feature-extractor stage. Unstabilized
# denominators near zero amplify relevance at weakly activated pixels and
# make the maps fragile to the exact trained weights.
_FEATURE_EPS = 0.25


# ---------------------------------------------------------------------------
# Standalone rules on dense layers (numpy, float64)
# ---------------------------------------------------------------------------

def linear_relevance(activations: np.ndarray, weights: np.ndarray,
                     relevance_out: np.ndarray | float, rule: str = "basic",
                     eps: float = 0.1, gamma: float = 0.25) -> np.ndarray:
    """Redistribute output relevance through one dense layer a -> a @ w.

    rule "basic":   R_j = a_j sum_k w_jk R_k / z_k
    rule "epsilon": denominator z_k + eps * sign(z_k)
    rule "gamma":   weights replaced by w + gamma * max(w, 0)
    """
    a = np.asarray(activations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    r = np.atleast_1d(np.asarray(relevance_out, dtype=np.float64))
    if rule == "gamma":
        w = w + gamma * np.clip(w, 0.0, None)
    elif rule not in ("basic", "epsilon"):
        raise PropagationError(f"unknown LRP rule {rule!r}")
    z = a @ w
    if rule == "epsilon":
        z = z + eps * np.where(z >= 0, 1.0, -1.0)
    z = np.where(np.abs(z) < _GUARD, _GUARD, z)
    return a * (w @ (r / z))


def dense_network_lrp(weights: list[np.ndarray], x: np.ndarray, target: int,
                      rule: str = "basic", eps: float = 0.1,
                      gamma: float = 0.25) -> tuple[np.ndarray, float]:
    """Forward a ReLU dense net (linear last layer), then propagate the target
    logit back to the input under a single rule. Returns (relevances, logit)."""
    acts = [np.asarray(x, dtype=np.float64)]
    for i, w in enumerate(weights):
        z = acts[-1] @ np.asarray(w, dtype=np.float64)
        acts.append(z if i == len(weights) - 1 else np.maximum(z, 0.0))
    logit = float(acts[-1][target])
    r = np.zeros_like(acts[-1])
    r[target] = logit
    for w, a in zip(reversed(weights), reversed(acts[:-1])):
        r = linear_relevance(a, w, r, rule=rule, eps=eps, gamma=gamma)
    return r, logit


# ---------------------------------------------------------------------------
# Composite propagation through the MIL model (torch)
# ---------------------------------------------------------------------------

def _stab(z: torch.Tensor, eps: float) -> torch.Tensor:
    z = z + eps * torch.where(z >= 0, 1.0, -1.0)
    return torch.where(z.abs() < _GUARD, torch.full_like(z, _GUARD), z)


def _grad_prop(x: torch.Tensor, fn, r_out: torch.Tensor, eps: float) -> torch.Tensor:
    xv = x.clone().detach().requires_grad_(True)
    z = fn(xv)
    s = (r_out / _stab(z.detach(), eps)).detach()
    (z * s).sum().backward()
    return (xv * xv.grad).detach()


def _pad_fn(conv: torch.nn.Conv2d):
    """Apply the conv's own padding explicitly so modified-weight copies keep
    its padding mode."""
    ph, pw = conv.padding if isinstance(conv.padding, tuple) else (conv.padding,) * 2
    if ph == 0 and pw == 0:
        return lambda t: t
    mode = "constant" if conv.padding_mode == "zeros" else conv.padding_mode
    return lambda t: F.pad(t, (pw, pw, ph, ph), mode=mode)


def _mod_conv(conv: torch.nn.Conv2d, gamma: float):
    w = conv.weight + gamma * conv.weight.clamp(min=0)
    b = None if conv.bias is None else conv.bias + gamma * conv.bias.clamp(min=0)
    pad = _pad_fn(conv)
    return lambda t: F.conv2d(pad(t), w, b, stride=conv.stride)


def _block_fn(block, gamma: float):
    conv_a = _mod_conv(block.conv_a, gamma)
    conv_b = _mod_conv(block.conv_b, gamma)
    proj = None if block.proj is None else _mod_conv(block.proj, gamma)

    def fn(t):
        y = conv_b(F.relu(conv_a(t)))
        skip = t if proj is None else proj(t)
        return F.relu(y + skip)

    return fn


def _zbox_prop(x: torch.Tensor, conv: torch.nn.Conv2d, r_out: torch.Tensor,
               low: float, high: float) -> torch.Tensor:
    xv = x.clone().detach().requires_grad_(True)
    lo = torch.full_like(x, low, requires_grad=True)
    hi = torch.full_like(x, high, requires_grad=True)
    w_pos = conv.weight.clamp(min=0)
    w_neg = conv.weight.clamp(max=0)
    pad = _pad_fn(conv)
    z = (F.conv2d(pad(xv), conv.weight, conv.bias, stride=conv.stride)
         - F.conv2d(pad(lo), w_pos, None, stride=conv.stride)
         - F.conv2d(pad(hi), w_neg, None, stride=conv.stride))
    s = (r_out / _stab(z.detach(), 0.0)).detach()
    (z * s).sum().backward()
    return (xv * xv.grad + lo * lo.grad + hi * hi.grad).detach()


def lrp(model, bag, target_class: int,
        rules: LRPRuleAssignment | None = None) -> AttributionResult:
    """Propagate the target-class logit back to input pixels of every instance.

    Maps are the channel sum of input relevance, signed.
    """
    rules = rules if rules is not None else LRPRuleAssignment()
    rules.validate()
    if not isinstance(model, MILModel):
        raise PropagationError(
            f"no rule assignment for model type {type(model).__name__}"
        )
    x = bag_to_tensor(bag)
    model.eval()
    g, e = rules.gamma, rules.epsilon

    with torch.no_grad():
        a0 = x
        a1 = F.relu(model.conv1(a0))
        a2 = model.block1(a1)
        a3 = F.max_pool2d(a2, 2)
        a4 = model.block2(a3)
        a5 = F.max_pool2d(a4, 2)
        a6 = model.block3(a5)
        H = model.embed_fc(F.adaptive_max_pool2d(a6, 2).flatten(1))
        z, _alpha = attention_pool(H, model.attention_v.weight,
                                   model.attention_w.weight[0])
        c1 = F.relu(model.classifier_fc1(z))
        logits = model.classifier_fc2(c1)

    r = torch.zeros_like(logits)
    r[target_class] = logits[target_class]

    # classifier and attention pooling: epsilon rule
    r = _grad_prop(c1, lambda t: model.classifier_fc2(t), r, e)
    r = _grad_prop(z, lambda t: F.relu(model.classifier_fc1(t)), r, e)
    r = _grad_prop(
        H,
        lambda Hm: attention_pool(Hm, model.attention_v.weight,
                                  model.attention_w.weight[0])[0],
        r, e,
    )
    # deepest embedder stages: strong positive emphasis (pooling passes
    # relevance to winners)
    fc_deep = _mod_linear(model.embed_fc, _DEEP_GAMMA)
    r = _grad_prop(a6, lambda t: fc_deep(F.adaptive_max_pool2d(t, 2).flatten(1)),
                   r, _FEATURE_EPS)
    r = _grad_prop(a5, _block_fn(model.block3, _DEEP_GAMMA), r, _FEATURE_EPS)
    # lower feature blocks: configured gamma
    r = _grad_prop(a4, lambda t: F.max_pool2d(t, 2), r, 0.0)
    r = _grad_prop(a3, _block_fn(model.block2, g), r, _FEATURE_EPS)
    r = _grad_prop(a2, lambda t: F.max_pool2d(t, 2), r, 0.0)
    r = _grad_prop(a1, _block_fn(model.block1, g), r, _FEATURE_EPS)
    # first layer: ZBox with the data bounds
    r = _zbox_prop(a0, model.conv1, r, rules.zbox_low, rules.zbox_high)

    maps = r.sum(dim=1).numpy().astype(np.float64)
    return AttributionResult(
        method="lrp",
        target_class=target_class,
        maps=maps,
        signed=True,
        metadata={
            "zbox_low": rules.zbox_low,
            "zbox_high": rules.zbox_high,
            "gamma": g,
            "epsilon": e,
        },
    )


def _mod_linear(fc: torch.nn.Linear, gamma: float):
    w = fc.weight + gamma * fc.weight.clamp(min=0)
    b = None if fc.bias is None else fc.bias + gamma * fc.bias.clamp(min=0)
    return lambda t: F.linear(t, w, b)
