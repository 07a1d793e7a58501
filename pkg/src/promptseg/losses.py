"""Training losses and evaluation metrics.

Mask generation is supervised by dice plus cross-entropy; in grid-points
mode the predicted IoU additionally gets a mean-squared-error term against
the (constant) IoU of the binarized prediction vs ground truth, with
weights 1, 1, 10. In whole-box mode only the mask is supervised:
dice + cross-entropy, unweighted.

Differentiable losses take torch tensors of logits; the evaluation metrics
(dice score, IoU target) are numpy pixel-counting functions on binary masks.
Empty-vs-empty dice and IoU are defined as 1.0: organ-free slices with an
empty prediction count as perfect agreement.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isfinite

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .prompts import GRID_POINTS, WHOLE_BOX

DICE_EPS = 1e-5


class LossModeError(ValueError):
    """Loss components inconsistent with the training mode."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 10.0

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    dice: float
    ce: float
    mse: float | None
    total: float
    mode: str


def _check_shapes(logits: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}")
    if logits.ndim == 2:
        logits, gt = logits.unsqueeze(0), gt.unsqueeze(0)
    return logits.flatten(1), gt.to(logits.dtype).flatten(1)


def dice_loss(logits: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Soft dice loss on sigmoid probabilities, averaged over the batch."""
    p, g = _check_shapes(logits, gt)
    p = torch.sigmoid(p)
    inter = (p * g).sum(dim=1)
    denom = p.sum(dim=1) + g.sum(dim=1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def ce_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Mean per-pixel binary cross-entropy, computed stably from logits."""
    p, g = _check_shapes(logits, gt)
    return F.binary_cross_entropy_with_logits(p, g)


def mse_loss(pred: Tensor | float, target: Tensor | float) -> Tensor:
    """Squared error of the IoU prediction against its constant target."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    return ((pred - target) ** 2).mean()


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def iou_target(pred_mask: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty.

    Used as the regression target for the IoU head; it is computed from a
    binarized prediction and never carries gradient.
    """
    p = _as_binary(pred_mask, "pred_mask")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def dice_score(pred_mask: np.ndarray, gt: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|) on binary masks; 1.0 when both are empty."""
    p = _as_binary(pred_mask, "pred_mask")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def combined_loss(
    mode: str,
    dice: float,
    ce: float,
    mse: float | None,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Total training loss for one step.

    grid_points: lambda1*dice + lambda2*ce + lambda3*mse (mse required);
    whole_box: dice + ce (mse must be absent).
    """
    if mode == GRID_POINTS:
        if mse is None:
            raise LossModeError("grid_points mode requires an mse component")
        total = weights.lambda1 * dice + weights.lambda2 * ce + weights.lambda3 * mse
    elif mode == WHOLE_BOX:
        if mse is not None:
            raise LossModeError("whole_box mode supervises only the mask; mse must be None")
        total = dice + ce
    else:
        raise LossModeError(f"unknown mode {mode!r}")
    return LossBreakdown(dice=dice, ce=ce, mse=mse, total=total, mode=mode)
