"""Hierarchical cross-entropy and hierarchical dice losses over leaf logits.

Logit fields are arrays of shape ``(..., num_leaves)`` (usually ``(H, W, N)``)
and targets are integer leaf indices of shape ``(...)``. Every level of the
hierarchy sees the same leaf softmax; a node's probability is the sum of its
leaves' probabilities. The combined loss is the plain sum of both hierarchy
losses, with no weighting.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from hierseg.hierarchy import ClassHierarchy

LOG_CLAMP = 1e-30


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-6
    # "sum" matches the per-image pixel sum of the cross-entropy term;
    # "mean" divides it by the pixel count and is only a training option.
    reduction: str = "sum"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


DEFAULT_CONFIG = LossConfig()


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _check(logits: np.ndarray, target: np.ndarray, h: ClassHierarchy) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target)
    if x.shape[-1] != h.num_leaves:
        raise ValueError(f"logits carry {x.shape[-1]} classes, hierarchy has {h.num_leaves}")
    if x.shape[:-1] != t.shape:
        raise ValueError(f"logit field {x.shape[:-1]} and target {t.shape} disagree")
    if t.size and (t.min() < 0 or t.max() >= h.num_leaves):
        raise ValueError("target holds leaf indices outside the hierarchy")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    return x.reshape(-1, h.num_leaves), t.reshape(-1).astype(np.intp)


def _node_probs(probs: np.ndarray, target: np.ndarray, h: ClassHierarchy, level: int):
    q = probs @ h.membership(level)
    node_t = h.projection(level)[target]
    return q, node_t


def _hcel_from_probs(probs, target, h, level, cfg, stats=None) -> float:
    q, node_t = _node_probs(probs, target, h, level)
    q_t = q[np.arange(len(node_t)), node_t]
    clamped = q_t < LOG_CLAMP
    if stats is not None and clamped.any():
        stats["clamped"] += int(clamped.sum())
    value = -np.log(np.maximum(q_t, LOG_CLAMP)).sum()
    if cfg.reduction == "mean":
        value /= max(len(node_t), 1)
    return float(value)


def _hdl_from_probs(probs, target, h, level, cfg) -> float:
    q, node_t = _node_probs(probs, target, h, level)
    overlap = q[np.arange(len(node_t)), node_t].sum()
    # one-hot targets contribute exactly one unit per pixel to the denominator
    total = len(node_t) + q.sum()
    return float(1.0 - 2.0 * (overlap + cfg.epsilon) / (total + cfg.epsilon))


def hcel_level(logits, target, h: ClassHierarchy, level: int, cfg: LossConfig = DEFAULT_CONFIG,
               stats: Counter | None = None) -> float:
    """Cross entropy of the target's node at one level, summed over pixels.

    Probabilities that underflow to zero are clamped before the log; pass a
    ``Counter`` as ``stats`` to count how often that happens.
    """
    x, t = _check(logits, target, h)
    return _hcel_from_probs(softmax_probs(x), t, h, level, cfg, stats)


def hcel_total(logits, target, h: ClassHierarchy, cfg: LossConfig = DEFAULT_CONFIG,
               stats: Counter | None = None) -> float:
    x, t = _check(logits, target, h)
    p = softmax_probs(x)
    return sum(_hcel_from_probs(p, t, h, lev, cfg, stats) for lev in range(h.num_levels))


def hdl_level(logits, target, h: ClassHierarchy, level: int, cfg: LossConfig = DEFAULT_CONFIG) -> float:
    """Micro soft dice loss at one level (nodes and pixels summed inside one ratio)."""
    x, t = _check(logits, target, h)
    return _hdl_from_probs(softmax_probs(x), t, h, level, cfg)


def hdl_total(logits, target, h: ClassHierarchy, cfg: LossConfig = DEFAULT_CONFIG) -> float:
    x, t = _check(logits, target, h)
    p = softmax_probs(x)
    return sum(_hdl_from_probs(p, t, h, lev, cfg) for lev in range(h.num_levels))


def combined_loss(logits, target, h: ClassHierarchy, cfg: LossConfig = DEFAULT_CONFIG,
                  stats: Counter | None = None) -> float:
    x, t = _check(logits, target, h)
    p = softmax_probs(x)
    return sum(
        _hcel_from_probs(p, t, h, lev, cfg, stats) + _hdl_from_probs(p, t, h, lev, cfg)
        for lev in range(h.num_levels)
    )


def combined_loss_and_grad(logits, target, h: ClassHierarchy, cfg: LossConfig = DEFAULT_CONFIG,
                           stats: Counter | None = None) -> tuple[float, np.ndarray]:
    """Combined loss and its exact gradient with respect to the leaf logits."""
    shape = np.shape(logits)
    x, t = _check(logits, target, h)
    p = softmax_probs(x)
    rows = np.arange(len(t))
    n_pix = len(t)
    scale = 1.0 / n_pix if cfg.reduction == "mean" else 1.0
    eps = cfg.epsilon

    value = 0.0
    grad_p = np.zeros_like(p)
    for lev in range(h.num_levels):
        m = h.membership(lev)
        q, node_t = _node_probs(p, t, h, lev)
        grad_q = np.zeros_like(q)

        q_t = q[rows, node_t]
        safe = np.maximum(q_t, LOG_CLAMP)
        if stats is not None and (q_t < LOG_CLAMP).any():
            stats["clamped"] += int((q_t < LOG_CLAMP).sum())
        value += -np.log(safe).sum() * scale
        # the clamp is flat below LOG_CLAMP, so no gradient flows there
        grad_q[rows, node_t] -= np.where(q_t < LOG_CLAMP, 0.0, scale / safe)

        overlap = q_t.sum() + eps
        total = n_pix + q.sum() + eps
        value += 1.0 - 2.0 * overlap / total
        # d/dq of -2*overlap/total: overlap grows only at the target node,
        # total grows at every node
        grad_q += 2.0 * overlap / total**2
        grad_q[rows, node_t] -= 2.0 / total

        grad_p += grad_q @ m.T

    grad_x = p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))
    return float(value), grad_x.reshape(shape)


def combined_loss_grad(logits, target, h: ClassHierarchy, cfg: LossConfig = DEFAULT_CONFIG) -> np.ndarray:
    return combined_loss_and_grad(logits, target, h, cfg)[1]


def finite_diff_grad(logits, target, h: ClassHierarchy, cfg: LossConfig = DEFAULT_CONFIG,
                     step: float = 1e-5,
                     fn: Callable[..., float] | None = None) -> np.ndarray:
    """Central-difference gradient of ``fn`` (default: ``combined_loss``) per logit."""
    if not step > 0:
        raise ValueError("step must be positive")
    fn = fn or combined_loss
    x = np.array(logits, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x, target, h, cfg)
        flat[i] = orig - step
        down = fn(x, target, h, cfg)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)``, the gradient-check discrepancy.

    Normalizing by the largest component rather than elementwise keeps
    near-zero components, where central differences are dominated by
    cancellation noise, from swamping the comparison.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)
