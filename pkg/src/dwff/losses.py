"""Composite training objective: Dice + Focal, L2 on weight matrices, fusion-weight entropy."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

PT_FLOOR = 1e-7
LOG_COLUMNS = ("step", "dice", "focal", "seg", "l2", "entropy", "total")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.04
    lambda2: float = 0.01
    alpha: float = 0.5
    beta: float = 0.5
    eps: float = 1.0
    gamma: float = 2.0
    alpha_t: float = 0.25

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.eps < 0:
            raise ValueError("lambda1, lambda2 and eps must be non-negative")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha and beta must be non-negative and not both zero")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.alpha_t <= 1:
            raise ValueError("alpha_t must lie in (0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    dice: float
    focal: float
    seg: float
    l2: float
    entropy: float
    total: float

    def csv_row(self, step: int) -> list[str]:
        return [str(step)] + [repr(float(v)) for v in astuple(self)]

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        n = len(items)
        return cls(*(math.fsum(getattr(it, f.name) for it in items) / n for f in fields(cls)))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """B x H x W ids -> B x C x H x W float one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label ids must lie in [0, {num_classes})")
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)


def _check_probs(probs: Tensor, labels: np.ndarray) -> None:
    if probs.ndim != 4:
        raise ValueError(f"probs must be B x C x H x W, got {probs.shape}")
    b, _, h, w = probs.shape
    if np.shape(labels) != (b, h, w):
        raise ValueError(f"labels shape {np.shape(labels)} does not match probs {probs.shape}")
    if np.any(probs.data < 0) or np.any(np.abs(probs.data.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probs must be non-negative and sum to 1 over classes")


def dice_loss(probs: Tensor, labels: np.ndarray, eps: float = 1.0) -> Tensor:
    """Class-averaged smoothed soft Dice loss over all pixels of the batch."""
    _check_probs(probs, labels)
    return _dice(probs, one_hot(labels, probs.shape[1]), eps)


def _dice(probs: Tensor, y: np.ndarray, eps: float) -> Tensor:
    inter = T.sum(probs * Tensor(y), axes=(0, 2, 3))
    denom = T.sum(probs, axes=(0, 2, 3)) + Tensor(y.sum(axis=(0, 2, 3)) + eps)
    ratio = (T.scale(inter, 2.0) + eps) / denom
    return T.mean(1.0 - ratio)


def focal_loss(probs: Tensor, labels: np.ndarray, gamma: float = 2.0, alpha_t: float = 0.25) -> Tensor:
    """Pixel-mean of -alpha_t (1 - p_t)^gamma log p_t."""
    _check_probs(probs, labels)
    return _focal(probs, one_hot(labels, probs.shape[1]), gamma, alpha_t)


def _focal(probs: Tensor, y: np.ndarray, gamma: float, alpha_t: float) -> Tensor:
    pt = T.clip(T.sum(probs * Tensor(y), axes=1), PT_FLOOR, np.inf)
    modulating = T.power(1.0 - pt, gamma)
    return T.scale(T.mean(modulating * T.log(pt)), -alpha_t)


def l2_loss(weights) -> Tensor:
    """Sum of squares over the given weight tensors."""
    return T.sum_squares(list(weights))


def row_entropy(weights: Tensor) -> Tensor:
    """Per-row Shannon entropy (nats) with 0 ln 0 = 0; shape B."""
    if np.any(weights.data < 0):
        raise ValueError("weights must be non-negative")
    zero = Tensor((weights.data == 0).astype(np.float64))
    return T.neg(T.sum(weights * T.log(weights + zero), axes=1))


def weight_entropy_loss(weights: Tensor) -> Tensor:
    if weights.ndim != 2:
        raise ValueError(f"weights must be B x m, got {weights.shape}")
    return T.mean(row_entropy(weights))


def total_loss(
    probs: Tensor,
    labels: np.ndarray,
    weights: Tensor,
    l2_weights,
    cfg: LossConfig = LossConfig(),
) -> tuple[Tensor, LossBreakdown]:
    """seg + lambda1 * l2 - lambda2 * entropy, plus its per-term breakdown."""
    _check_probs(probs, labels)
    y = one_hot(labels, probs.shape[1])
    dice = _dice(probs, y, cfg.eps)
    focal = _focal(probs, y, cfg.gamma, cfg.alpha_t)
    seg = T.scale(dice, cfg.alpha) + T.scale(focal, cfg.beta)
    l2 = l2_loss(l2_weights)
    ent = weight_entropy_loss(weights)
    total = seg + T.scale(l2, cfg.lambda1) - T.scale(ent, cfg.lambda2)
    parts = LossBreakdown(
        dice=dice.item(),
        focal=focal.item(),
        seg=seg.item(),
        l2=l2.item(),
        entropy=ent.item(),
        total=total.item(),
    )
    return total, parts
