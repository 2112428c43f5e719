"""Minibatch training of the dual-branch net with a plateau learning-rate schedule.

Each image's loss is the pixel-summed combined loss; a minibatch's loss is
the mean over its images.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from hierseg.data import Example, apply_augmentation, draw_augmentation
from hierseg.hierarchy import ClassHierarchy
from hierseg.loss import LossConfig
from hierseg.masks import MFP, MTP
from hierseg.metrics import confusion, dice, full_contact_metrics
from hierseg.model import DualBranchNet, backward, predict

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 5
    lr: float = 1e-4
    patience: int = 3
    decay: float = 2.0
    min_lr: float = 1e-6
    seed: int = 0
    augment: bool = True
    optimizer: str = "sgd"
    weight_decay: float = 0.01
    reduction: str = "sum"
    epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "patience", "decay", "min_lr", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.min_lr > self.lr:
            raise ValueError("learning-rate floor exceeds the initial rate")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(epsilon=self.epsilon, reduction=self.reduction)


class PlateauSchedule:
    """Divide the rate by ``decay`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 3, decay: float = 2.0, min_lr: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.decay = decay
        self.min_lr = min_lr
        self.best = -math.inf
        self.bad_epochs = 0
        self.triggers = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when it is a new best."""
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr / self.decay, self.min_lr)
            self.bad_epochs = 0
            self.triggers += 1
        return False


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dice_mtp: float | None
    val_dice_mfp: float | None
    val_dice_full: float | None
    val_dice: float
    best: bool

    def to_line(self) -> str:
        def fmt(v):
            if v is None:
                return "undefined"
            if isinstance(v, bool):
                return str(int(v))
            return repr(v)
        return " ".join(f"{k}={fmt(v)}" for k, v in asdict(self).items())


@dataclass
class TrainResult:
    net: DualBranchNet
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def log_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.log)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def validation_dice(net: DualBranchNet, examples: Sequence[Example]) -> dict[str, float | None]:
    """Mean per-image Dice for MTP, MFP and FULL; undefined images are skipped."""
    per = {"MTP": [], "MFP": [], "FULL": []}
    for ex in examples:
        pred = predict(net, ex.image)
        per["MTP"].append(dice(confusion(pred, ex.labels, MTP)))
        per["MFP"].append(dice(confusion(pred, ex.labels, MFP)))
        per["FULL"].append(dice(full_contact_metrics(pred, ex.labels)))
    return {k: _mean(v) for k, v in per.items()}


def monitored_dice(scores: dict[str, float | None]) -> float:
    """Unweighted mean of the MTP and MFP Dice (whichever are defined)."""
    vals = [scores[k] for k in ("MTP", "MFP") if scores[k] is not None]
    return float(np.mean(vals)) if vals else 0.0


def _batch(examples: Sequence[Example], idx, epoch: int, cfg: TrainConfig):
    images, labels = [], []
    for i in idx:
        img, lab = examples[i].image, examples[i].labels
        if cfg.augment:
            rng = np.random.default_rng([cfg.seed, epoch, int(i)])
            img, lab = apply_augmentation(img, lab, draw_augmentation(rng))
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def sgd_step(net: DualBranchNet, grads, lr: float) -> None:
    for name, g in grads.items():
        net.params[name] -= lr * g


class AdamW:
    """Adam with decoupled weight decay; the step size does not depend on loss scale."""

    def __init__(self, params, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, net: DualBranchNet, grads, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, g in grads.items():
            p = net.params[name]
            p *= 1 - lr * self.weight_decay
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def train(net: DualBranchNet, train_set: Sequence[Example], val_set: Sequence[Example],
          hierarchy: ClassHierarchy, cfg: TrainConfig = TrainConfig(), on_epoch=None) -> TrainResult:
    """Train in place and return the best-validation-epoch weights plus the epoch log.

    Raises ``TrainingDiverged`` as soon as a batch loss is not finite.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation splits must be non-empty")
    loss_cfg = cfg.loss_config
    schedule = PlateauSchedule(cfg.lr, cfg.patience, cfg.decay, cfg.min_lr)
    order_rng = np.random.default_rng(cfg.seed)
    result = TrainResult(net.copy())
    adam = AdamW(net.params, cfg.weight_decay) if cfg.optimizer == "adamw" else None

    for epoch in range(1, cfg.epochs + 1):
        lr = schedule.lr
        order = order_rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, labels = _batch(train_set, idx, epoch, cfg)
            if not all(np.all(np.isfinite(p)) for p in net.params.values()):
                raise TrainingDiverged(f"non-finite weights at epoch {epoch}, batch starting {start}, lr {lr}")
            grads, value = backward(net, images, labels, hierarchy, loss_cfg)
            for g in grads.values():
                g /= len(idx)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch starting {start}, lr {lr}")
            if adam is not None:
                adam.step(net, grads, lr)
            else:
                sgd_step(net, grads, lr)
            total += value

        scores = validation_dice(net, val_set)
        monitor = monitored_dice(scores)
        improved = schedule.step(monitor)
        if improved:
            result.net = net.copy()
            result.best_epoch = epoch
        rec = EpochRecord(epoch, lr, total / len(train_set), scores["MTP"], scores["MFP"],
                          scores["FULL"], monitor, improved)
        result.log.append(rec)
        log.info(rec.to_line())
        if on_epoch is not None:
            on_epoch(rec)
    return result
