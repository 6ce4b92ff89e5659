"""Pseudo-label generation: fixed-threshold binarization and the variational
threshold posterior with reparameterized sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

DEFAULT_THRESHOLD = 0.5
THRESHOLD_MIN = 0.01
THRESHOLD_MAX = 0.99


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior over the confidence threshold."""

    mean: float
    std: float

    def __post_init__(self):
        if not 0.0 < self.mean < 1.0:
            raise ValueError(f"prior mean must be in (0, 1), got {self.mean}")
        if self.std <= 0.0:
            raise ValueError(f"prior std must be positive, got {self.std}")


@dataclass
class ThresholdPosterior:
    """Approximate posterior N(mean, exp(log_variance)) over the threshold."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if not (torch.isfinite(self.mean) and torch.isfinite(self.log_variance)):
            raise ValueError("posterior parameters must be finite")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)


@dataclass
class PseudoLabelBatch:
    """Binary training targets derived from predictions; carries no gradient."""

    mask: torch.Tensor
    threshold_used: float
    detached: bool = True


def binarize_fixed(probabilities: torch.Tensor, threshold=DEFAULT_THRESHOLD) -> PseudoLabelBatch:
    """Pseudo-labels by strict thresholding: mask = 1 where p > threshold."""
    if not torch.isfinite(probabilities).all():
        raise ValueError("probabilities contain non-finite values")
    t_value = float(threshold.detach()) if torch.is_tensor(threshold) else float(threshold)
    if not 0.0 < t_value < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t_value}")
    mask = (probabilities > threshold).to(probabilities.dtype).detach()
    return PseudoLabelBatch(mask=mask, threshold_used=t_value)


class PosteriorHead(nn.Module):
    """Maps a feature batch to one shared (mean, log variance) threshold posterior.

    Global average pooling over batch and space, a 3x3 conv block, then two
    parallel 1x1 convs. Output weights start small and biases start at
    (init_mean, init_log_variance) so a fresh head behaves like a confident
    posterior near the plain fixed threshold.
    """

    def __init__(self, in_channels: int, spatial_rank: int = 2,
                 init_mean: float = 0.5, init_log_variance: float = -14.0):
        super().__init__()
        if spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {spatial_rank}")
        conv = nn.Conv2d if spatial_rank == 2 else nn.Conv3d
        self.config = {
            "in_channels": in_channels,
            "spatial_rank": spatial_rank,
            "init_mean": init_mean,
            "init_log_variance": init_log_variance,
        }
        self.spatial_rank = spatial_rank
        # pooled input is 1x1 spatially, so normalize over all channels at once
        norm = nn.GroupNorm(1, in_channels) if in_channels > 1 else nn.Identity()
        self.block = nn.Sequential(
            conv(in_channels, in_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            norm,
        )
        self.mean_head = conv(in_channels, 1, 1)
        self.log_var_head = conv(in_channels, 1, 1)
        # small output weights: the posterior starts as a confident distribution
        # at (init_mean, init_log_variance) with mild feature conditioning
        for head, bias in ((self.mean_head, init_mean), (self.log_var_head, init_log_variance)):
            nn.init.normal_(head.weight, std=0.001)
            nn.init.constant_(head.bias, bias)

    def forward(self, features: torch.Tensor) -> ThresholdPosterior:
        if features.shape[0] == 0:
            raise ValueError("empty unlabelled sub-batch: the variational step needs unlabelled data")
        if features.ndim != 2 + self.spatial_rank:
            raise ValueError(
                f"expected [batch, channel, *spatial] features of rank {2 + self.spatial_rank}, "
                f"got rank {features.ndim}"
            )
        # one threshold per batch: pool over batch and all spatial dims
        pooled = features.mean(dim=(0, *range(2, features.ndim)), keepdim=True)
        hidden = self.block(pooled)
        mean = self.mean_head(hidden).reshape(())
        log_variance = self.log_var_head(hidden).reshape(())
        return ThresholdPosterior(mean=mean, log_variance=log_variance)


def posterior_from_features(head: PosteriorHead, bottleneck_features) -> ThresholdPosterior:
    return head(bottleneck_features)


def sample_threshold(posterior: ThresholdPosterior, noise=None, generator=None) -> torch.Tensor:
    """Reparameterized threshold sample, clamped to [0.01, 0.99].

    ``noise`` is a standard-normal draw; pass it explicitly for deterministic
    tests, otherwise it is drawn from ``generator``. The result stays
    differentiable w.r.t. the posterior parameters away from the clamp
    boundary.
    """
    if noise is None:
        noise = torch.randn((), generator=generator, dtype=posterior.mean.dtype)
    elif not torch.is_tensor(noise):
        noise = torch.as_tensor(noise, dtype=posterior.mean.dtype)
    raw = posterior.mean + noise * torch.exp(0.5 * posterior.log_variance)
    return torch.clamp(raw, THRESHOLD_MIN, THRESHOLD_MAX)


def make_pseudo_labels_vi(probabilities: torch.Tensor, posterior: ThresholdPosterior,
                          noise=None, generator=None) -> PseudoLabelBatch:
    """Variational pseudo-labels: one sampled threshold shared across every
    channel of the batch, then strict binarization."""
    threshold = sample_threshold(posterior, noise=noise, generator=generator)
    return binarize_fixed(probabilities, threshold)
