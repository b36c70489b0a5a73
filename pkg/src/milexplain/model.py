"""Attention-based MIL model: per-instance embedder, attention pooling,
bag classifier, with a registry of named layers for attribution engines.

The embedder is a small residual conv backbone (stem plus three residual
blocks) followed by adaptive max pooling and a fully connected projection.
The attention scorer computes ``w^T tanh(V h_k^T)`` per instance (both
linear maps bias-free), the bag embedding is the attention-weighted
average of instance embeddings.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Bag
from .errors import FormatVersionError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class BagOutput:
    logits: torch.Tensor        # (C,)
    probs: torch.Tensor         # (C,)
    attention: torch.Tensor     # (N,)
    embeddings: torch.Tensor    # (N, d)
    bag_embedding: torch.Tensor  # (d,)


def attention_pool(H: torch.Tensor, V: torch.Tensor,
                   w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gated-tanh attention pooling.

    scores_k = w^T tanh(V h_k^T); alpha = softmax(scores); z = sum_k alpha_k h_k.
    """
    if H.ndim != 2 or V.shape[1] != H.shape[1] or w.shape[0] != V.shape[0]:
        raise ShapeError(
            f"incompatible shapes H{tuple(H.shape)} V{tuple(V.shape)} w{tuple(w.shape)}"
        )
    scores = torch.tanh(H @ V.T) @ w
    alpha = torch.softmax(scores, dim=0)
    z = alpha @ H
    return z, alpha


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv_a = nn.Conv2d(in_ch, out_ch, 3, padding=1, padding_mode="replicate")
        self.conv_b = nn.Conv2d(out_ch, out_ch, 3, padding=1, padding_mode="replicate")
        self.proj = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x):
        y = F.relu(self.conv_a(x))
        y = self.conv_b(y)
        skip = x if self.proj is None else self.proj(x)
        return F.relu(y + skip)


class MILModel(nn.Module):
    """MIL classifier over bags of (3, H, W) instances.

    Registry names (stable across save/load):
      conv1, block1, block2, block3, embed_fc, attention_v, attention_w,
      classifier_fc1, classifier_fc2
    """

    def __init__(self, num_classes: int = 3, embed_dim: int = 64,
                 attention_dim: int = 128, base_width: int = 8):
        super().__init__()
        w = base_width
        self.hparams = {
            "num_classes": num_classes,
            "embed_dim": embed_dim,
            "attention_dim": attention_dim,
            "base_width": base_width,
        }
        # replicate padding: zero padding leaves a bright frame in conv
        # activations that attracts attribution mass to the image border
        self.conv1 = nn.Conv2d(3, w, 3, padding=1, padding_mode="replicate")
        self.block1 = ResidualBlock(w, w)
        self.block2 = ResidualBlock(w, 2 * w)
        self.block3 = ResidualBlock(2 * w, 4 * w)
        self.embed_fc = nn.Linear(4 * w * 4, embed_dim)
        self.attention_v = nn.Linear(embed_dim, attention_dim, bias=False)
        self.attention_w = nn.Linear(attention_dim, 1, bias=False)
        self.classifier_fc1 = nn.Linear(embed_dim, embed_dim)
        self.classifier_fc2 = nn.Linear(embed_dim, num_classes)
        self.registry = {
            "conv1": self.conv1,
            "block1": self.block1,
            "block2": self.block2,
            "block3": self.block3,
            "embed_fc": self.embed_fc,
            "attention_v": self.attention_v,
            "attention_w": self.attention_w,
            "classifier_fc1": self.classifier_fc1,
            "classifier_fc2": self.classifier_fc2,
        }
        # conv layers usable as GradCAM / IBA targets, in forward order
        self.conv_layer_names = ["conv1", "block1", "block2", "block3"]
        self._init_weights()

    def _init_weights(self) -> None:
        # default torch init attenuates the signal through this many ReLU
        # stages; Kaiming keeps activation variance input-dependent
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def embed_instances(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) -> (N, embed_dim)."""
        x = F.relu(self.conv1(x))
        x = self.block1(x)
        x = F.max_pool2d(x, 2)
        x = self.block2(x)
        x = F.max_pool2d(x, 2)
        x = self.block3(x)
        x = F.adaptive_max_pool2d(x, 2)
        x = x.flatten(1)
        return self.embed_fc(x)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(N, 3, H, W) -> (logits (C,), alpha (N,), H (N, d))."""
        H = self.embed_instances(x)
        z, alpha = attention_pool(H, self.attention_v.weight, self.attention_w.weight[0])
        logits = self.classifier_fc2(F.relu(self.classifier_fc1(z)))
        return logits, alpha, H

    def forward_bag(self, bag: Bag | torch.Tensor | np.ndarray) -> BagOutput:
        x = bag_to_tensor(bag)
        logits, alpha, H = self(x)
        return BagOutput(
            logits=logits,
            probs=torch.softmax(logits, dim=0),
            attention=alpha,
            embeddings=H,
            bag_embedding=alpha @ H,
        )

    def bag_probs(self, pixels: torch.Tensor | np.ndarray) -> torch.Tensor:
        """Class probabilities for an (N, 3, H, W) pixel stack."""
        with torch.no_grad():
            logits, _, _ = self(bag_to_tensor(pixels))
        return torch.softmax(logits, dim=0)

    @contextmanager
    def capture(self, layer_names: list[str]):
        """Capture forward activations of registry layers into a caller-owned dict."""
        buffers: dict[str, torch.Tensor] = {}
        handles = []
        for name in layer_names:
            if name not in self.registry:
                raise ShapeError(f"unknown registry layer {name!r}")

            def hook(module, inputs, output, _name=name):
                buffers[_name] = output

            handles.append(self.registry[name].register_forward_hook(hook))
        try:
            yield buffers
        finally:
            for h in handles:
                h.remove()


def bag_to_tensor(bag: Bag | torch.Tensor | np.ndarray) -> torch.Tensor:
    """Stack a bag into an (N, 3, H, W) float tensor, checking spatial agreement."""
    if isinstance(bag, torch.Tensor):
        return bag.float()
    if isinstance(bag, np.ndarray):
        return torch.from_numpy(bag).float()
    shape0 = bag.instances[0].pixels.shape
    for inst in bag.instances:
        if inst.pixels.shape != shape0:
            raise ShapeError(
                f"instance {inst.instance_id} has shape {inst.pixels.shape}, "
                f"expected {shape0}"
            )
    return torch.from_numpy(bag.pixel_array()).float()


def save_checkpoint(model: MILModel, path: str | Path) -> Path:
    """Write a portable checkpoint: format version, hyperparameters, parameters
    keyed by registry-derived state_dict names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "hparams": model.hparams,
            "params": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> MILModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"checkpoint format_version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    model = MILModel(**payload["hparams"])
    model.load_state_dict(payload["params"])
    model.eval()
    return model


def checkpoint_digest(path: str | Path) -> str:
    """SHA-256 of the checkpoint file, for artifact provenance stamps."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
