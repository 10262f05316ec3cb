"""Task losses and the staged training objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .heads import TaskSpec
from .numerics import Tensor


@dataclass(frozen=True)
class EfficiencyTargets:
    block_target_fraction: float = 0.9
    token_target_fraction: float = 0.6
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("block_target_fraction", "token_target_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


PRESETS = {
    "H": EfficiencyTargets(block_target_fraction=0.9, token_target_fraction=0.6, alpha=1.0),
    "L": EfficiencyTargets(block_target_fraction=0.5, token_target_fraction=0.5, alpha=1.0),
}


@dataclass
class ActivationStats:
    """Batch-averaged activation fractions.

    block_fraction is a scalar Tensor; token_fractions is [layers] where
    layer l's value is the share of its tokens actually processed (a closed
    block processes none). layer_weights holds each layer's embedding dim.
    """

    block_fraction: Tensor
    token_fractions: Tensor
    layer_weights: np.ndarray


def activation_stats(decisions: Sequence, layer_weights: Sequence, deployed: bool = False) -> ActivationStats:
    """Batch activation fractions; ``deployed`` reads each decision's noise-free masks when present."""
    pairs = [d.deployed if deployed and d.deployed is not None else (d.block_mask, d.token_mask)
             for d in decisions]
    blocks = [bm for bm, _ in pairs]
    tokens = []
    for bm, tm in pairs:
        per_example = bm * nx.mean(tm, axis=1)
        tokens.append(nx.mean(per_example).reshape(1))
    b = nx.mean(nx.concat([m.reshape(-1, 1) for m in blocks], axis=1))
    p = nx.concat(tokens, axis=0)
    return ActivationStats(b, p, np.asarray(layer_weights, dtype=np.float64))


# -- task losses -------------------------------------------------------------

def task_loss(pred, target, task: TaskSpec) -> Tensor:
    """Mean pixel loss: cross-entropy, BCE-with-logits, or 1 - cosine on foreground."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if task.kind == "segmentation":
        B, K, H, W = pred.shape
        labels = target.astype(np.int64)
        if labels.shape != (B, H, W):
            raise nx.ShapeError(f"task_loss[{task.name}]: labels {labels.shape} vs logits {pred.shape}")
        if labels.min() < 0 or labels.max() >= K:
            raise ValueError(f"task_loss[{task.name}]: label out of range [0, {K})")
        onehot = (labels[:, None] == np.arange(K)[None, :, None, None]).astype(pred.data.dtype)
        logp = nx.log_softmax(pred, axis=1)
        return nx.neg(nx.sum_(logp * onehot)) * (1.0 / (B * H * W))
    if task.kind == "saliency":
        y = target.astype(pred.data.dtype).reshape(pred.shape)
        return nx.mean(nx.softplus(pred) - pred * y)
    if task.kind == "normals":
        t = target.astype(pred.data.dtype)
        if t.shape != pred.shape:
            raise nx.ShapeError(f"task_loss[{task.name}]: target {t.shape} vs prediction {pred.shape}")
        fg = (np.abs(t).sum(axis=1) > 0).astype(pred.data.dtype)
        count = fg.sum()
        if count == 0:
            return nx.sum_(pred * 0.0)
        norm = nx.sqrt(nx.sum_(pred * pred, axis=1) + 1e-8)
        cos = nx.sum_(pred * t, axis=1) / norm
        return nx.sum_((1.0 - cos) * fg) * (1.0 / float(count))
    raise ValueError(f"unknown task kind {task.kind!r}")


def stage1_loss(preds: dict, targets: dict, tasks: Sequence[TaskSpec]) -> Tensor:
    total = None
    for t in tasks:
        term = task_loss(preds[t.name], targets[t.name], t) * t.loss_weight
        total = term if total is None else total + term
    return total


def stage2_loss(decisions: Sequence) -> Tensor:
    """Sum over blocks of (1 - block mask) + (1 - mean token mask), averaged over the batch.

    Decisions that carry per-task masks are scored on those (averaged over
    tasks) so every sub-network is pushed to all-on, not only their union.
    """
    total = None
    for d in decisions:
        pairs = list(d.per_task.values()) or [(d.block_mask, d.token_mask)]
        for bm, tm in pairs:
            term = nx.mean(1.0 - bm) + nx.mean(1.0 - nx.mean(tm, axis=-1))
            term = term * (1.0 / len(pairs))
            total = term if total is None else total + term
    return total


def blocks_loss(stats: ActivationStats, targets: EfficiencyTargets) -> Tensor:
    diff = stats.block_fraction - targets.block_target_fraction
    return diff * diff


def tokens_loss(stats: ActivationStats, targets: EfficiencyTargets, weighted: bool = True,
                form: str = "per_layer") -> Tensor:
    """Embedding-dim weighted token-fraction loss.

    per_layer:     sum_l w_l (p_l - t)^2 / sum_l w_l
    weighted_mean: (sum_l w_l p_l / sum_l w_l - t)^2
    ``weighted=False`` uses uniform w_l.
    """
    p = stats.token_fractions
    w = stats.layer_weights if weighted else np.ones_like(stats.layer_weights)
    w = (w / w.sum()).astype(p.data.dtype)
    t = targets.token_target_fraction
    if form == "per_layer":
        d = p - t
        return nx.sum_(d * d * w)
    if form == "weighted_mean":
        d = nx.sum_(p * w) - t
        return d * d
    raise ValueError(f"unknown tokens loss form {form!r}")


def efficiency_loss(stats: ActivationStats, targets: EfficiencyTargets, weighted: bool = True,
                    form: str = "per_layer") -> Tensor:
    return blocks_loss(stats, targets) + tokens_loss(stats, targets, weighted, form)


def stage3_loss(task_losses, eff, alpha: float) -> Tensor:
    return nx.as_tensor(task_losses) + nx.as_tensor(eff) * alpha
