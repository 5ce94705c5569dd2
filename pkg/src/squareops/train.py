"""Optimization recipe and the training loop.

SGD with Nesterov momentum, linear warmup into a cosine-decaying learning
rate, optional weight decay (skipped for batchnorm and the square-module
scalars), pad-crop-flip augmentation, and per-epoch metric capture. A run
is a pure function of its config seed: init, shuffling, augmentation, and
dropout all derive from it.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import Model
from .tensor import Tape, Tensor, backward, softmax_ce


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 100
    warmup_epochs: int = 5
    seed: int = 0
    dropout_rate: float = 0.2
    augmentation: str = "crop-flip"
    shared_softmin_scale: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.epochs == 0 and self.warmup_epochs != 0:
            raise ValueError("warmup_epochs must be 0 for a zero-epoch run")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0,1)")
        if self.augmentation not in ("none", "crop-flip"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def lr_at(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Learning rate at a global step: linear warmup then cosine decay to 0."""
    if total_steps <= warmup_steps:
        raise ValueError("total_steps must exceed warmup_steps")
    if step < warmup_steps:
        return lr0 * (step + 1) / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * frac))


def sgd_nesterov_step(params: dict, grads: dict, velocity: dict, lr: float,
                      momentum: float, weight_decay: float,
                      nesterov: bool = True, no_decay=frozenset()):
    """One optimizer step over name-keyed arrays, updating in place.

    Weight decay enters the gradient first (g <- g + wd*p), then
    v <- momentum*v + g and the update is p <- p - lr*(g + momentum*v) in
    Nesterov form, or p <- p - lr*v without it.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay != 0.0 and name not in no_decay:
            g = g + weight_decay * p
        v = velocity[name]
        v *= momentum
        v += g
        p -= lr * (g + momentum * v) if nesterov else lr * v
    return params, velocity


def adam_step(params: dict, grads: dict, m: dict, v: dict, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step over name-keyed arrays (t counts from 1).

    Used by the synthetic-data fits, where the badly conditioned two-layer
    loss defeats plain momentum SGD; the image-model runs keep Nesterov SGD.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        mhat = m[name] / (1.0 - beta1 ** t)
        vhat = v[name] / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, m, v


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


@dataclass
class ExperimentResult:
    """Per-epoch metric series plus the final summary for one run."""

    records: list = field(default_factory=list)
    final_train_loss: float = math.nan
    final_train_acc: float = math.nan
    final_test_loss: float = math.nan
    final_test_acc: float = math.nan
    best_test_acc: float = math.nan
    best_test_loss: float = math.nan
    wall_seconds: float = 0.0
    diverged: bool = False

    def to_csv(self, path) -> None:
        lines = ["epoch,lr,train_loss,train_acc,test_loss,test_acc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.lr:.6g},{r.train_loss:.6g},"
                         f"{r.train_acc:.6g},{r.test_loss:.6g},{r.test_acc:.6g}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self) -> dict:
        # wall-clock time deliberately lives in the run manifest, not here,
        # so summaries of identical runs are byte-identical
        return {
            "epochs_run": len(self.records),
            "diverged": self.diverged,
            "final": {"train_loss": self.final_train_loss,
                      "train_acc": self.final_train_acc,
                      "test_loss": self.final_test_loss,
                      "test_acc": self.final_test_acc},
            "best": {"test_acc": self.best_test_acc,
                     "test_loss": self.best_test_loss},
        }


def evaluate(model: Model, dataset, batch_size: int = 500):
    """Inference-mode mean loss and accuracy over a dataset."""
    n = len(dataset)
    total_loss, correct = 0.0, 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x, y = dataset.batch(idx)
        logits = model.forward(Tensor(x), mode="inference")
        loss = softmax_ce(logits, y)
        total_loss += loss.item() * idx.size
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
    return total_loss / n, correct / n


def run_training(model: Model, train_ds, test_ds, config: TrainConfig,
                 progress=None) -> ExperimentResult:
    """Train a classifier; capture per-epoch metrics; flag divergence.

    Identical (model seed, config) pairs produce bitwise-identical metric
    series. Training halts early with diverged=True when the loss stops
    being finite.
    """
    n = len(train_ds)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    augment = config.augmentation == "crop-flip"

    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    result = ExperimentResult()
    t0 = time.perf_counter()
    gstep = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch, 11]).permutation(n)
        aug_rng = np.random.default_rng([config.seed, epoch, 22])
        drop_rng = np.random.default_rng([config.seed, epoch, 33])
        epoch_lr = lr_at(gstep, total_steps, warmup_steps, config.lr0)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            lr = lr_at(gstep, total_steps, warmup_steps, config.lr0)
            x, y = train_ds.batch(idx, augment=augment, rng=aug_rng)
            with Tape() as tape:
                logits = model.forward(Tensor(x), mode="training", rng=drop_rng)
                loss = softmax_ce(logits, y)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                result.diverged = True
                break
            backward(tape, loss)
            grads = {name: p.grad for name, p in model.params.items()}
            sgd_nesterov_step({k: p.data for k, p in model.params.items()},
                              grads, velocity, lr, config.momentum,
                              config.weight_decay, config.nesterov,
                              model.no_decay)
            model.zero_grads()
            loss_sum += loss_val * idx.size
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            gstep += 1
        if result.diverged:
            break
        test_loss, test_acc = evaluate(model, test_ds)
        rec = EpochRecord(epoch, epoch_lr, loss_sum / n, correct / n,
                          test_loss, test_acc)
        result.records.append(rec)
        if progress is not None:
            progress(rec)

    result.wall_seconds = time.perf_counter() - t0
    if result.records:
        last = result.records[-1]
        result.final_train_loss = last.train_loss
        result.final_train_acc = last.train_acc
        result.final_test_loss = last.test_loss
        result.final_test_acc = last.test_acc
        result.best_test_acc = max(r.test_acc for r in result.records)
        result.best_test_loss = min(r.test_loss for r in result.records)
    else:
        # zero-epoch (or immediately diverged) run: report metrics at init
        train_loss, train_acc = evaluate(model, train_ds)
        test_loss, test_acc = evaluate(model, test_ds)
        result.final_train_loss, result.final_train_acc = train_loss, train_acc
        result.final_test_loss, result.final_test_acc = test_loss, test_acc
        result.best_test_acc, result.best_test_loss = test_acc, test_loss
    return result


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
