"""Segmentation losses and the weighted training objective.

Binary losses take probabilities shaped (B, ...); Dice is computed per
sample over the non-batch dims and averaged. Multi-class Dice pools the
batch per class and averages over all K classes, background included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F

from .ssm import ContractError

__all__ = [
    "LossWeights",
    "NonFiniteLossError",
    "bce_loss",
    "bce_with_logits_loss",
    "dice_loss",
    "bcedice_loss",
    "bcedice_with_logits",
    "cedice_components",
    "cedice_loss",
    "total_loss",
]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 1.0
    beta: float = 0.5
    eps_clamp: float = 1e-7
    dice_smooth: float = 1e-5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha", "beta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.eps_clamp < 0.5:
            raise ValueError("eps_clamp must lie in (0, 0.5)")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(probs: torch.Tensor, targets: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    _same_shape(probs, targets)
    p = probs.clamp(eps, 1 - eps)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log1p(-p)).mean()


def bce_with_logits_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    _same_shape(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - soft Dice, per sample along dim 0, averaged."""
    _same_shape(probs, targets)
    p = probs.reshape(probs.shape[0], -1) if probs.ndim > 1 else probs.reshape(1, -1)
    t = targets.reshape(p.shape).to(p.dtype)
    inter = (p * t).sum(1)
    score = (2 * inter + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return 1 - score.mean()


def bcedice_loss(probs, targets, w: LossWeights = None) -> torch.Tensor:
    w = w or LossWeights()
    return w.lambda1 * bce_loss(probs, targets, w.eps_clamp) + w.lambda2 * dice_loss(probs, targets, w.dice_smooth)


def bcedice_with_logits(logits, targets, w: LossWeights = None) -> torch.Tensor:
    """BceDice on raw logits; the BCE term uses the log-sum-exp formulation."""
    w = w or LossWeights()
    probs = torch.sigmoid(logits)
    return w.lambda1 * bce_with_logits_loss(logits, targets) + w.lambda2 * dice_loss(probs, targets, w.dice_smooth)


def cedice_components(
    logits: torch.Tensor, targets: torch.Tensor, smooth: float = 1e-5
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean pixel cross-entropy and per-class soft Dice loss (K,).

    logits: (B, K, H, W); targets: (B, H, W) integer class indices.
    """
    if logits.ndim != targets.ndim + 1 or logits.shape[:1] + logits.shape[2:] != targets.shape:
        raise ContractError(f"logits {tuple(logits.shape)} incompatible with targets {tuple(targets.shape)}")
    K = logits.shape[1]
    if K < 2:
        raise ContractError("cross-entropy Dice needs K >= 2")
    targets = targets.long()
    if targets.numel() and (targets.min() < 0 or targets.max() >= K):
        raise ContractError(f"class index out of range [0, {K})")
    ce = F.cross_entropy(logits, targets)
    probs = logits.softmax(1)
    onehot = F.one_hot(targets, K).movedim(-1, 1).to(probs.dtype)
    dims = [0] + list(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    per_class = 1 - (2 * inter + smooth) / (probs.sum(dims) + onehot.sum(dims) + smooth)
    return ce, per_class


def cedice_loss(logits, targets, w: LossWeights = None) -> torch.Tensor:
    w = w or LossWeights()
    ce, per_class = cedice_components(logits, targets, w.dice_smooth)
    return w.lambda1 * ce + w.lambda2 * per_class.mean()


def total_loss(seg_loss, l_proj, l_prog, w: LossWeights = None):
    """seg + alpha * proj + beta * prog; refuses non-finite inputs."""
    w = w or LossWeights()
    for name, v in (("seg", seg_loss), ("proj", l_proj), ("prog", l_prog)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFiniteLossError(f"non-finite {name} loss: {float(v)}")
    return seg_loss + w.alpha * l_proj + w.beta * l_prog
