"""Metrics, Monte-Carlo threshold inference, FGSM attack and robustness sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Backbone
from .data import normalize_torch, ood_corrupt
from .losses import dice_loss
from .pseudo import PosteriorHead, sample_threshold

INTENSITY_RANGE = (0.0, 1.0)
DEFAULT_MC_SAMPLES = 5


def iou(pred_mask, gt_mask) -> float:
    """Intersection over union of two binary masks; empty union counts as 1."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred_mask", pred), ("gt_mask", gt)):
        if not ((arr == 0) | (arr == 1)).all():
            raise ValueError(f"{name} must be binary")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def brier(probabilities, gt_mask) -> float:
    """Mean squared difference between predicted probability and binary truth."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(gt_mask, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    return float(np.mean((p - y) ** 2))


def predictions_to_masks(probabilities: torch.Tensor) -> torch.Tensor:
    """Binary label maps from per-channel probabilities.

    Single-channel output thresholds at 0.5; multi-channel output takes the
    argmax across channels and returns the one-hot map.
    """
    if probabilities.shape[1] == 1:
        return (probabilities > 0.5).to(probabilities.dtype)
    winners = probabilities.argmax(dim=1, keepdim=True)
    one_hot = torch.zeros_like(probabilities)
    return one_hot.scatter_(1, winners, 1.0)


def macro_iou(pred_masks, gt_masks) -> float:
    """Per-channel IoU averaged across channels (equals plain IoU for C=1)."""
    pred = np.asarray(pred_masks)
    gt = np.asarray(gt_masks)
    return float(np.mean([iou(pred[c], gt[c]) for c in range(pred.shape[0])]))


def predict_probabilities(model: Backbone, images, scope="per-case", chunk=16) -> torch.Tensor:
    """Forward a raw [N, C, ...] array through normalization and the model."""
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            batch = torch.as_tensor(np.ascontiguousarray(images[start:start + chunk]), dtype=torch.float32)
            batch = batch if scope is None else normalize_torch(batch, scope)
            outputs.append(model(batch).probabilities)
    return torch.cat(outputs, dim=0)


def per_image_iou(model: Backbone, images, masks, scope="per-case") -> list[float]:
    probs = predict_probabilities(model, images, scope)
    pred = predictions_to_masks(probs).numpy()
    gt = np.asarray(masks)
    return [macro_iou(pred[i], gt[i]) for i in range(len(gt))]


@dataclass
class MCPrediction:
    mean_map: np.ndarray
    sample_masks: np.ndarray
    thresholds: list[float]


def mc_predict(model: Backbone, head: PosteriorHead, images, n_samples=DEFAULT_MC_SAMPLES,
               seed=0, scope="per-case") -> MCPrediction:
    """Monte-Carlo inference: one forward pass, ``n_samples`` thresholds drawn
    from the learned posterior, vote-averaged into an uncertainty map."""
    if head is None:
        raise ValueError("mc_predict needs the threshold posterior head of a segpl_vi run")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        batch = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
        batch = batch if scope is None else normalize_torch(batch, scope)
        result = model(batch)
        posterior = head(result.bottleneck_features)
        masks, thresholds = [], []
        for _ in range(n_samples):
            t = sample_threshold(posterior, generator=generator)
            masks.append((result.probabilities > t).to(torch.float32).numpy())
            thresholds.append(float(t))
    sample_masks = np.stack(masks)
    return MCPrediction(sample_masks.mean(axis=0), sample_masks, thresholds)


def fgsm_attack(model, images, gt_masks, epsilon, scope="per-case",
                intensity_range=INTENSITY_RANGE, chunk=8):
    """Fast gradient sign attack on the Dice loss.

    ``model`` is either a Backbone (run through the normalization pipeline
    given by ``scope``) or any callable mapping an input tensor to
    probabilities (used with scope=None for analytic toy cases). Returns
    adversarial images clipped to ``intensity_range`` with
    ``|x_adv - x|_inf <= epsilon``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if isinstance(model, Backbone):
        def probs_fn(x):
            xn = x if scope is None else normalize_torch(x, scope)
            return model(xn).probabilities
    else:
        probs_fn = model

    source = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    adversarial = []
    for start in range(0, source.shape[0], chunk):
        x = source[start:start + chunk].clone().requires_grad_(True)
        gt = torch.as_tensor(np.ascontiguousarray(gt_masks[start:start + chunk]), dtype=torch.float32)
        loss = dice_loss(probs_fn(x), gt)
        (grad,) = torch.autograd.grad(loss, x)
        x_adv = torch.clamp(x.detach() + epsilon * torch.sign(grad), *intensity_range)
        adversarial.append(x_adv)
    return torch.cat(adversarial, dim=0).numpy()


@dataclass
class EvalReport:
    """Clean metrics plus the corruption and attack sweep tables."""

    per_image_iou: list[float]
    mean_iou: float
    std_iou: float
    brier: float
    gamma_table: dict[float, float] = field(default_factory=dict)
    epsilon_table: dict[float, float] = field(default_factory=dict)
    mc_samples: int = 0

    def rows(self):
        """Delimited-output rows: (sweep, parameter, mean_iou)."""
        out = [("clean", 0.0, self.mean_iou)]
        out += [("gamma", g, v) for g, v in sorted(self.gamma_table.items())]
        out += [("epsilon", e, v) for e, v in sorted(self.epsilon_table.items())]
        return out


def robustness_sweep(model: Backbone, images, masks, gamma_list=(), epsilon_list=(),
                     contrast_range=(0.4, 2.2), noise_std=0.3, seed=0,
                     scope="per-case", head=None, mc_samples=DEFAULT_MC_SAMPLES) -> EvalReport:
    """Evaluate mean IoU under mix-up corruption strengths and FGSM strengths.

    Each test image keeps one fixed corruption field across the whole gamma
    sweep (seeded per image), so gamma is the only moving part. The gamma=0 and
    epsilon=0 entries reuse the clean prediction path and therefore match the
    clean IoU exactly.
    """
    images = np.asarray(images)
    masks = np.asarray(masks)
    clean_scores = per_image_iou(model, images, masks, scope)
    if head is not None:
        mc = mc_predict(model, head, images, n_samples=mc_samples, seed=seed, scope=scope)
        brier_score = brier(mc.mean_map, masks)
    else:
        brier_score = brier(predict_probabilities(model, images, scope).numpy(), masks)

    gamma_table = {}
    for gamma in gamma_list:
        corrupted = np.stack([
            ood_corrupt(images[i], gamma, contrast_range, noise_std, seed=seed * 100003 + i)
            for i in range(len(images))
        ])
        gamma_table[float(gamma)] = float(np.mean(per_image_iou(model, corrupted, masks, scope)))

    epsilon_table = {}
    for epsilon in epsilon_list:
        attacked = fgsm_attack(model, images, masks, epsilon, scope)
        epsilon_table[float(epsilon)] = float(np.mean(per_image_iou(model, attacked, masks, scope)))

    return EvalReport(
        per_image_iou=clean_scores,
        mean_iou=float(np.mean(clean_scores)),
        std_iou=float(np.std(clean_scores)),
        brier=brier_score,
        gamma_table=gamma_table,
        epsilon_table=epsilon_table,
        mc_samples=mc_samples if head is not None else 0,
    )
