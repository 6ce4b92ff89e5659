"""Configurable encoder-decoder segmentation network with checkpointing."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    spatial_rank: int = 2
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        for name in ("in_channels", "out_channels", "base_width", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive int")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2**self.depth


@dataclass
class ForwardResult:
    probabilities: torch.Tensor
    logits: torch.Tensor
    bottleneck_features: torch.Tensor


def _conv_nd(rank):
    return nn.Conv2d if rank == 2 else nn.Conv3d


def _norm(channels):
    # group-style normalization; stable for the batch sizes of 1-2 used here
    return nn.GroupNorm(math.gcd(8, channels), channels)


def _stage(rank, in_ch, out_ch):
    conv = _conv_nd(rank)
    return nn.Sequential(
        conv(in_ch, out_ch, 3, padding=1),
        _norm(out_ch),
        nn.ReLU(inplace=True),
        conv(out_ch, out_ch, 3, padding=1),
        _norm(out_ch),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """U-Net style model emitting per-pixel foreground probabilities.

    Each stage is (conv3 -> norm -> ReLU) x2; downsampling by stride-2 max
    pooling, upsampling by nearest-neighbor interpolation plus conv, skip
    connections by concatenation. Forward returns probabilities, logits and
    the bottleneck feature map (input spatial dims / 2**depth).
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        rank = config.spatial_rank
        widths = [config.base_width * 2**i for i in range(config.depth + 1)]

        self.encoders = nn.ModuleList(
            _stage(rank, config.in_channels if i == 0 else widths[i - 1], widths[i])
            for i in range(config.depth)
        )
        self.bottleneck = _stage(rank, widths[config.depth - 1], widths[config.depth])
        self.upconvs = nn.ModuleList(
            _conv_nd(rank)(widths[i + 1], widths[i], 3, padding=1) for i in range(config.depth)
        )
        self.decoders = nn.ModuleList(
            _stage(rank, 2 * widths[i], widths[i]) for i in range(config.depth)
        )
        self.head = _conv_nd(rank)(widths[0], config.out_channels, 1)
        self.pool = nn.MaxPool2d(2) if rank == 2 else nn.MaxPool3d(2)

    def _validate(self, images: torch.Tensor):
        cfg = self.config
        want_ndim = 2 + cfg.spatial_rank
        if images.ndim != want_ndim:
            raise ValueError(
                f"expected a [batch, channel, *spatial] tensor of rank {want_ndim}, "
                f"got rank {images.ndim}"
            )
        if images.shape[1] != cfg.in_channels:
            raise ValueError(
                f"channel dimension (dim 1) is {images.shape[1]}, config expects {cfg.in_channels}"
            )
        divisor = 2**cfg.depth
        for dim in range(2, images.ndim):
            if images.shape[dim] % divisor:
                raise ValueError(
                    f"spatial dim {dim} has size {images.shape[dim]}, "
                    f"not divisible by 2**depth = {divisor}"
                )

    def forward(self, images: torch.Tensor) -> ForwardResult:
        self._validate(images)
        x = images
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        bottleneck = x
        for i in reversed(range(self.config.depth)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.upconvs[i](x)
            x = self.decoders[i](torch.cat([x, skips[i]], dim=1))
        logits = self.head(x)
        return ForwardResult(torch.sigmoid(logits), logits, bottleneck)


def save_checkpoint(model: Backbone, posterior_head, optimizer_state, step: int, path):
    """Serialize model (+ optional posterior head) parameters and step.

    The file is a single binary container holding a manifest (format version,
    config echo, step) plus named parameter arrays.
    """
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone_config": asdict(model.config),
        "step": int(step),
        "model_state": model.state_dict(),
        "head_config": None if posterior_head is None else dict(posterior_head.config),
        "head_state": None if posterior_head is None else posterior_head.state_dict(),
        "optimizer_state": optimizer_state,
    }
    torch.save(payload, path)


@dataclass
class LoadedCheckpoint:
    model: Backbone
    posterior_head: object
    optimizer_state: dict | None
    step: int
    config: BackboneConfig


def load_checkpoint(path, expected_config: BackboneConfig | None = None) -> LoadedCheckpoint:
    """Rebuild model and head from a checkpoint; round-trips bit-identically.

    Raises FileNotFoundError for a missing path, ValueError on a format-version
    tag or config mismatch.
    """
    from .pseudo import PosteriorHead  # local import to avoid a cycle

    try:
        payload = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    config = BackboneConfig(**payload["backbone_config"])
    if expected_config is not None and config != expected_config:
        for key, want in asdict(expected_config).items():
            got = getattr(config, key)
            if got != want:
                raise ValueError(f"checkpoint {key}={got} does not match expected {key}={want}")
    model = Backbone(config)
    model.load_state_dict(payload["model_state"])
    head = None
    if payload["head_config"] is not None:
        head = PosteriorHead(**payload["head_config"])
        head.load_state_dict(payload["head_state"])
    return LoadedCheckpoint(model, head, payload["optimizer_state"], payload["step"], config)
