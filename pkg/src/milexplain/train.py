"""Training loop for the MIL model: per-bag cross entropy, SGD with Nesterov
momentum (Adam selectable), early stopping on validation loss, and metric
evaluation on held-out bags.

Bags are processed one at a time; gradient accumulation over a configurable
number of bags stands in for batching, since bags of differing sizes do not
stack into a single tensor.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .errors import ConfigurationError, DataError, TrainingDivergedError
from .metrics import MetricsReport, compute_metrics
from .model import MILModel, bag_to_tensor


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    nesterov_momentum: float = 0.9
    max_epochs: int = 100
    patience_epochs: int = 5
    rng_seed: int = 0
    optimizer: str = "adam"         # "adam" or "sgd" (Nesterov)
    grad_accum_bags: int = 4

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.nesterov_momentum < 1.0:
            raise ConfigurationError("nesterov_momentum must be in [0, 1)")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.patience_epochs < 1:
            raise ConfigurationError("patience_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_accum_bags < 1:
            raise ConfigurationError("grad_accum_bags must be >= 1")


class EarlyStopper:
    """Stop when validation loss has not decreased for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch's validation loss; True means stop now."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _make_optimizer(model: MILModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                           momentum=cfg.nesterov_momentum,
                           nesterov=cfg.nesterov_momentum > 0)


def validation_loss(model: MILModel, val: Dataset) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for bag in val.bags:
            logits, _, _ = model(bag_to_tensor(bag))
            losses.append(F.cross_entropy(logits.unsqueeze(0),
                                          torch.tensor([bag.label])).item())
    return float(np.mean(losses))


def train(model: MILModel, train_set: Dataset, val_set: Dataset,
          cfg: TrainConfig) -> tuple[MILModel, list[dict]]:
    """Train in place and return (model restored to best-val weights, log).

    The log holds one dict per epoch: epoch, train_loss, val_loss, timestamp.
    Deterministic for a fixed seed apart from the timestamp field.
    """
    cfg.validate()
    if not train_set.bags or not val_set.bags:
        raise DataError("train and val sets must be non-empty")
    if train_set.num_classes != val_set.num_classes:
        raise DataError("train/val num_classes mismatch")
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    opt = _make_optimizer(model, cfg)
    stopper = EarlyStopper(cfg.patience_epochs)
    best_state = copy.deepcopy(model.state_dict())
    log: list[dict] = []
    order = np.arange(len(train_set.bags))
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        rng.shuffle(order)
        epoch_losses = []
        opt.zero_grad()
        for j, idx in enumerate(order):
            bag = train_set.bags[idx]
            logits, _, _ = model(bag_to_tensor(bag))
            loss = F.cross_entropy(logits.unsqueeze(0), torch.tensor([bag.label]))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            (loss / cfg.grad_accum_bags).backward()
            epoch_losses.append(loss.item())
            if (j + 1) % cfg.grad_accum_bags == 0 or j == len(order) - 1:
                opt.step()
                opt.zero_grad()
        val_loss = validation_loss(model, val_set)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "timestamp": time.time(),
        })
        improved = val_loss < stopper.best_loss
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    return model, log


def evaluate(model: MILModel, test: Dataset) -> MetricsReport:
    """Single prediction pass over the test bags, then the full metric suite."""
    if not test.bags:
        raise DataError("test set is empty")
    model.eval()
    probs = []
    with torch.no_grad():
        for bag in test.bags:
            logits, _, _ = model(bag_to_tensor(bag))
            probs.append(torch.softmax(logits, dim=0).numpy())
    return compute_metrics(test.labels(), np.stack(probs), test.num_classes)
