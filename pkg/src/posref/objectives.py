"""Losses (DiceCE, affinity-weighted contrastive, weighted total) and
overlap metrics (Dice, mIoU)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossBreakdown:
    sup: float
    unsup: float
    itcl_sup: float
    itcl_unsup: float
    weights: tuple  # (lambda_u, lambda_itcl_sup, lambda_itcl_unsup)

    @property
    def total(self) -> float:
        lu, ls, lun = self.weights
        return self.sup + lu * self.unsup + ls * self.itcl_sup + lun * self.itcl_unsup


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Dice loss (smooth 1) plus mean binary cross-entropy.

    Probabilities are clamped to [1e-7, 1-1e-7] before both terms.
    """
    if logits.shape != target.shape:
        raise ValueError("shape mismatch")
    p = torch.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = target
    dice = 1.0 - (2.0 * (p * y).sum() + DICE_SMOOTH) / (p.sum() + y.sum() + DICE_SMOOTH)
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
    return dice + bce


def pseudo_label(p: np.ndarray, delta_pl: float) -> np.ndarray:
    """Hard pseudo-mask: per-pixel inclusive threshold of a probability map."""
    return (p >= delta_pl).astype(np.float64)


def itcl_loss(v: torch.Tensor, u: torch.Tensor, affinity, tau: float) -> torch.Tensor:
    """Bidirectional affinity-weighted contrastive loss.

    v, u: (B,d) unit-normalized image/text embeddings; affinity: (B,B) with
    unit diagonal. Reduces to symmetric InfoNCE when the affinity is the
    identity.
    """
    if not (torch.isfinite(v).all() and torch.isfinite(u).all()):
        raise ValueError("non-finite embeddings")
    a = torch.as_tensor(affinity, dtype=v.dtype)
    s = v @ u.T / tau
    log_rows = torch.log_softmax(s, dim=1)
    log_cols = torch.log_softmax(s.T, dim=1)
    row_sums = a.sum(dim=1)
    term_i2t = (a * log_rows).sum(dim=1) / row_sums
    term_t2i = (a * log_cols).sum(dim=1) / row_sums
    b = v.shape[0]
    return -(term_i2t + term_t2i).sum() / (2.0 * b)


def total_loss(sup, unsup, itcl_sup, itcl_unsup,
               lambda_u=1.0, lambda_itcl_sup=0.02, lambda_itcl_unsup=0.1) -> LossBreakdown:
    return LossBreakdown(sup=sup, unsup=unsup, itcl_sup=itcl_sup, itcl_unsup=itcl_unsup,
                         weights=(lambda_u, lambda_itcl_sup, lambda_itcl_unsup))


def dice_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A∩B|/(|A|+|B|); both-empty convention is 1.0."""
    inter = float(np.sum((pred > 0) & (gt > 0)))
    total = float(np.sum(pred > 0) + np.sum(gt > 0))
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = float(np.sum((pred > 0) & (gt > 0)))
    union = float(np.sum((pred > 0) | (gt > 0)))
    if union == 0:
        return 1.0
    return inter / union


def miou_metric(preds, gts) -> float:
    """Mean per-sample IoU over a dataset."""
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))
