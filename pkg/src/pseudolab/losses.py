"""Dice similarity/loss, the combined pseudo-label loss and its variational
extension with a closed-form Gaussian KL term."""

from __future__ import annotations

from dataclasses import dataclass
import math

import torch

from .pseudo import PriorSpec, PseudoLabelBatch, ThresholdPosterior

DICE_EPS = 1e-8


@dataclass
class LossBreakdown:
    """Loss terms for one step; total = supervised + alpha_effective * unsupervised + kl.

    ``kl`` already carries any configured KL weight (zero for the fixed-threshold
    and supervised paths).
    """

    supervised: torch.Tensor
    unsupervised: torch.Tensor
    kl: torch.Tensor
    alpha_effective: float
    total: torch.Tensor


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice(a: torch.Tensor, b: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice similarity: (2*sum(a*b)+eps) / (sum(a)+sum(b)+eps).

    Sums run over channel and spatial dims; the fraction is averaged over the
    batch. Empty-vs-empty is a perfect match by the eps convention.
    """
    _check_same_shape(a, b)
    if eps <= 0:
        raise ValueError("eps must be positive")
    dims = tuple(range(1, a.ndim))
    intersection = (a * b).sum(dim=dims)
    mass = a.sum(dim=dims) + b.sum(dim=dims)
    return ((2.0 * intersection + eps) / (mass + eps)).mean()


def dice_loss(a: torch.Tensor, b: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    return 1.0 - soft_dice(a, b, eps)


def segpl_loss(pred_labelled, y_labelled, pred_unlabelled, pseudo: PseudoLabelBatch,
               alpha_effective: float, eps: float = DICE_EPS) -> LossBreakdown:
    """Supervised Dice plus alpha-weighted Dice against detached pseudo-labels."""
    if pred_labelled is None or pred_labelled.shape[0] == 0:
        raise ValueError("labelled batch required: the supervised term anchors training")
    if not pseudo.detached:
        raise ValueError("pseudo-label mask must be detached")
    if alpha_effective < 0:
        raise ValueError("alpha_effective must be nonnegative")
    supervised = dice_loss(pred_labelled, y_labelled, eps)
    unsupervised = dice_loss(pred_unlabelled, pseudo.mask, eps)
    kl = torch.zeros((), dtype=supervised.dtype)
    total = supervised + alpha_effective * unsupervised + kl
    return LossBreakdown(supervised, unsupervised, kl, float(alpha_effective), total)


def kl_gaussian(posterior: ThresholdPosterior, prior: PriorSpec) -> torch.Tensor:
    """Closed-form KL( N(mu, sigma^2) || N(prior.mean, prior.std^2) )."""
    sigma = torch.exp(0.5 * posterior.log_variance)
    gap = posterior.mean - prior.mean
    return (
        math.log(prior.std)
        - torch.log(sigma)
        + (sigma**2 + gap**2) / (2.0 * prior.std**2)
        - 0.5
    )


def segpl_vi_loss(pred_labelled, y_labelled, pred_unlabelled, pseudo: PseudoLabelBatch,
                  posterior: ThresholdPosterior, prior: PriorSpec, alpha_effective: float,
                  kl_weight: float = 1.0, eps: float = DICE_EPS) -> LossBreakdown:
    """Variational objective: pseudo-label loss terms plus the weighted KL."""
    base = segpl_loss(pred_labelled, y_labelled, pred_unlabelled, pseudo, alpha_effective, eps)
    kl = kl_weight * kl_gaussian(posterior, prior)
    return LossBreakdown(
        supervised=base.supervised,
        unsupervised=base.unsupervised,
        kl=kl,
        alpha_effective=base.alpha_effective,
        total=base.total + kl,
    )
