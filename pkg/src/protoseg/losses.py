"""Training objectives: Dice, voxel cross-entropy, their sum, and the
voxel-prototype contrastive term, combined into the stage-weighted total.

Every loss reduces per patch first and then averages over the batch, so the
scale is independent of patch size and batch layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .prototypes import Assignment, PrototypeBank, measure_similarity

DICE_SMOOTHING = 1e-5
PROB_CLAMP = 1e-7


def _as_batch(p: torch.Tensor, y: torch.Tensor):
    if p.shape != y.shape:
        raise ValueError(f"prediction/target shapes differ: {tuple(p.shape)} vs {tuple(y.shape)}")
    if p.ndim == 3:
        p, y = p.unsqueeze(0), y.unsqueeze(0)
    return p.flatten(1), y.flatten(1).to(p.dtype)


def dice_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """1 - soft Dice; the smoothing term sits on both sides of the ratio so the
    empty-vs-empty case scores 0."""
    p, y = _as_batch(p, y)
    inter = (p * y).sum(dim=1)
    denom = (p * p).sum(dim=1) + (y * y).sum(dim=1)
    return (1.0 - (2.0 * inter + DICE_SMOOTHING) / (denom + DICE_SMOOTHING)).mean()


def bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood per voxel; probabilities clamped away from 0/1."""
    p, y = _as_batch(p, y)
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    return nll.mean(dim=1).mean()


def combined_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return dice_loss(p, y) + bce_loss(p, y)


def ppc_from_similarity(similarity_flat: torch.Tensor, positive_slot: torch.Tensor,
                        tau: float) -> torch.Tensor:
    """Softmax cross-entropy over all slots at temperature tau, mean over voxels."""
    logits = similarity_flat / tau
    return (torch.logsumexp(logits, dim=1)
            - logits.gather(1, positive_slot.unsqueeze(1)).squeeze(1)).mean()


def ppc_loss(x: torch.Tensor, assignment: Assignment, bank: PrototypeBank, dist,
             tau: float) -> torch.Tensor:
    """Pull each voxel toward its assigned prototype against all other slots.

    Gradients reach the features and the learned measure, never the bank.
    """
    scores = measure_similarity(x, bank, dist)
    if scores.ndim != 2:
        raise ValueError("ppc_loss expects flat (V, M) features")
    return ppc_from_similarity(scores, assignment.slot_index, tau)


@dataclass
class LossBreakdown:
    """Stage-weighted total and its components; tensors so callers can backprop."""

    dice_p1: torch.Tensor
    bce_p1: torch.Tensor
    dice_pf: torch.Tensor
    bce_pf: torch.Tensor
    ppc: torch.Tensor
    total: torch.Tensor
    fused_weight: float
    contrast_weight: float

    def as_floats(self) -> dict:
        return {
            "dice_p1": float(self.dice_p1.detach()),
            "bce_p1": float(self.bce_p1.detach()),
            "dice_pf": float(self.dice_pf.detach()),
            "bce_pf": float(self.bce_pf.detach()),
            "ppc": float(self.ppc.detach()),
            "total": float(self.total.detach()),
            "lambda1": self.fused_weight,
            "lambda2": self.contrast_weight,
        }


def total_loss(p1: torch.Tensor, pf: Optional[torch.Tensor], y: torch.Tensor,
               ppc: Optional[torch.Tensor], fused_weight: float,
               contrast_weight: float) -> LossBreakdown:
    """Lc(p1) + lambda1 * Lc(pf) + lambda2 * ppc, with the pieces kept visible."""
    zero = torch.zeros((), dtype=p1.dtype, device=p1.device)
    d1, b1 = dice_loss(p1, y), bce_loss(p1, y)
    if pf is not None:
        df, bf = dice_loss(pf, y), bce_loss(pf, y)
    else:
        df, bf = zero, zero
    ppc_term = ppc if ppc is not None else zero
    total = (d1 + b1) + fused_weight * (df + bf) + contrast_weight * ppc_term
    return LossBreakdown(dice_p1=d1, bce_p1=b1, dice_pf=df, bce_pf=bf,
                         ppc=ppc_term, total=total,
                         fused_weight=fused_weight, contrast_weight=contrast_weight)
