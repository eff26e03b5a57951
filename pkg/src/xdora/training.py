"""Minibatch training loop with early stopping on validation accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import EmbeddingRecord, class_weights
from .errors import NonFiniteLoss
from .fusion import (
    FusionConfig,
    FusionParams,
    batch_loss_and_grads,
    copy_params,
    forward_batch,
    init_params,
    records_to_arrays,
)
from .rng import make_rng


@dataclass(frozen=True)
class TrainSpec:
    batch_size: int = 16
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    max_epochs: int = 20
    patience: int = 5
    optimizer: str = "adamw"    # "adamw" | "sgd"
    seed: int = 42

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.max_epochs <= 0:
            raise ValueError("batch_size, learning_rate, max_epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (1 <= self.patience <= self.max_epochs):
            raise ValueError("patience must lie in 1..max_epochs")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: FusionParams, grads: FusionParams) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            params[name] -= self.lr * update
            params[name] -= self.lr * self.wd * params[name]


class SGD:
    def __init__(self, lr: float, weight_decay: float):
        self.lr = lr
        self.wd = weight_decay

    def step(self, params: FusionParams, grads: FusionParams) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * (g + self.wd * params[name])


def _make_optimizer(spec: TrainSpec):
    if spec.optimizer == "adamw":
        return AdamW(spec.learning_rate, spec.weight_decay)
    return SGD(spec.learning_rate, spec.weight_decay)


def accuracy(params: FusionParams, config: FusionConfig,
             records: Sequence[EmbeddingRecord], batch_size: int = 256) -> float:
    """Eval-mode argmax accuracy over labeled records."""
    correct = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        v0, t, mask, labels = records_to_arrays(chunk, config)
        _, probs, _ = forward_batch(params, config, v0, t, mask)
        correct += int(np.sum(np.argmax(probs, axis=1) == labels))
    return correct / len(records)


def train(
    train_records: Sequence[EmbeddingRecord],
    valid_records: Sequence[EmbeddingRecord],
    config: FusionConfig,
    spec: TrainSpec,
) -> tuple[FusionParams, list[dict]]:
    """Train from scratch; returns the best-validation-epoch parameters.

    One seeded stream drives init, epoch shuffles, and dropout masks, so a
    fixed seed reproduces the run bit-for-bit. Stops after ``patience``
    epochs without a strict validation-accuracy improvement.
    """
    if not train_records or not valid_records:
        raise ValueError("train and validation splits must be non-empty")
    rng = make_rng(spec.seed)
    params = init_params(config, rng)
    weights = class_weights([r.label for r in train_records], config.C)
    optimizer = _make_optimizer(spec)

    v0_all, t_all, mask_all, labels_all = records_to_arrays(train_records, config)
    n = len(train_records)

    best_params = copy_params(params)
    best_acc = -1.0
    bad_epochs = 0
    log: list[dict] = []

    for epoch in range(1, spec.max_epochs + 1):
        perm = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            value, grads = batch_loss_and_grads(
                params, config,
                v0_all[idx], t_all[idx], mask_all[idx], labels_all[idx],
                weights, train_mode=True, rng=rng)
            if not np.isfinite(value):
                raise NonFiniteLoss(
                    f"loss became non-finite at epoch {epoch}, "
                    f"batch starting at {start}")
            optimizer.step(params, grads)
            total_loss += value * idx.size
        train_loss = total_loss / n

        valid_acc = accuracy(params, config, valid_records)
        log.append({"epoch": epoch, "train_loss": train_loss,
                    "valid_accuracy": valid_acc})

        if valid_acc > best_acc:
            best_acc = valid_acc
            best_params = copy_params(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= spec.patience:
                break

    return best_params, log
