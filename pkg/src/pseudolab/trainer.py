"""Training loops: supervised warm-start baseline, fixed-threshold pseudo-label
training and its variational-threshold variant."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields, asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, save_checkpoint
from .data import DatasetSplit, batch_iterator, normalize_torch
from .losses import LossBreakdown, dice_loss, segpl_loss, segpl_vi_loss
from .pseudo import (
    DEFAULT_THRESHOLD,
    PosteriorHead,
    PriorSpec,
    binarize_fixed,
    make_pseudo_labels_vi,
)

MODES = ("supervised", "segpl", "segpl_vi")

METRICS_COLUMNS = (
    "step", "loss_total", "loss_sup", "loss_unsup", "loss_kl",
    "alpha_eff", "sampled_T", "val_iou", "wall_time_s",
)


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss; carries a diagnostic dump."""


@dataclass
class TrainConfig:
    mode: str = "segpl"
    labelled_bs: int = 2
    lr: float = 0.01
    steps: int = 320
    alpha: float = 1.0
    ratio: int = 4
    warmup_fraction: float = 0.5
    prior_mean: float = 0.9
    prior_std: float = 0.1
    kl_weight: float = 1.0
    head_lr_scale: float = 0.005
    seed: int = 0
    eval_every: int = 40
    normalize_scope: str = "per-case"
    head_source: str = "bottleneck"
    spatial_rank: int = 2
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.head_source not in ("bottleneck", "logits"):
            raise ValueError(f"head_source must be 'bottleneck' or 'logits', got {self.head_source!r}")
        if self.head_lr_scale <= 0:
            raise ValueError("head_lr_scale must be positive")

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(self.prior_mean, self.prior_std)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            spatial_rank=self.spatial_rank,
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            base_width=self.base_width,
            depth=self.depth,
        )


def save_train_config(config: TrainConfig, path):
    """Write the flat key-value config document (one ``key = value`` per line)."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(TrainConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_train_config(path) -> TrainConfig:
    """Parse a flat key-value config file; '#' starts a comment."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"str": str, "int": int, "float": float}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = casts[known[key]](value)
    return TrainConfig(**values)


def alpha_schedule(step: int, total_steps: int, alpha: float, warmup_fraction: float) -> float:
    """Linear ramp: 0 at step 0, reaching ``alpha`` at warmup_fraction * total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm_steps = warmup_fraction * total_steps
    if warm_steps == 0:
        return alpha
    return alpha * min(1.0, step / warm_steps)


@dataclass
class TrainState:
    model: Backbone
    head: PosteriorHead | None
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    noise_generator: torch.Generator | None = None
    best_val_iou: float = float("-inf")
    last_sampled_threshold: float | None = None


def init_train_state(config: TrainConfig) -> TrainState:
    """Build seeded model, optional posterior head and Adam optimizer.

    The head trains in its own parameter group at ``lr * head_lr_scale``: the
    binarization indicator blocks every likelihood gradient into the posterior,
    so at full speed the KL term alone would drag the posterior spread to the
    prior's within a few dozen steps; annealing it slowly keeps the sampled
    thresholds tight while the mean still settles.
    """
    torch.manual_seed(config.seed)
    model = Backbone(config.backbone_config)
    head = None
    groups = [{"params": list(model.parameters())}]
    if config.mode == "segpl_vi":
        head_channels = (
            config.backbone_config.bottleneck_channels
            if config.head_source == "bottleneck"
            else config.out_channels
        )
        head = PosteriorHead(head_channels, config.spatial_rank, init_mean=config.prior_mean)
        groups.append({"params": list(head.parameters()), "lr": config.lr * config.head_lr_scale})
    optimizer = torch.optim.Adam(groups, lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(model, head, optimizer, config, noise_generator=generator)


def _to_tensor(array, scope):
    return normalize_torch(torch.as_tensor(np.ascontiguousarray(array), dtype=torch.float32), scope)


def train_step(state: TrainState, labelled_batch, unlabelled_batch, config: TrainConfig,
               alpha_effective: float) -> tuple[TrainState, LossBreakdown]:
    """One optimizer update on a single concatenated forward pass.

    ``labelled_batch`` is (images, masks) as normalized tensors; for the two
    semi-supervised modes ``unlabelled_batch`` is an image tensor, for
    supervised mode it must be None and no unsupervised term is computed.
    Raises TrainingDiverged on a non-finite total loss.
    """
    images_l, masks_l = labelled_batch
    state.optimizer.zero_grad()
    state.last_sampled_threshold = None

    if config.mode == "supervised":
        result = state.model(images_l)
        supervised = dice_loss(result.probabilities, masks_l)
        zero = torch.zeros((), dtype=supervised.dtype)
        breakdown = LossBreakdown(supervised, zero, zero, 0.0, supervised)
    else:
        n_labelled = images_l.shape[0]
        result = state.model(torch.cat([images_l, unlabelled_batch], dim=0))
        if not torch.isfinite(result.probabilities).all():
            raise TrainingDiverged(
                f"non-finite predictions at step {state.step + 1} (before pseudo-labelling)"
            )
        probs_l = result.probabilities[:n_labelled]
        probs_u = result.probabilities[n_labelled:]
        if config.mode == "segpl":
            pseudo = binarize_fixed(probs_u, DEFAULT_THRESHOLD)
            breakdown = segpl_loss(probs_l, masks_l, probs_u, pseudo, alpha_effective)
        else:
            features = (
                result.bottleneck_features if config.head_source == "bottleneck" else result.logits
            )
            posterior = state.head(features[n_labelled:])
            pseudo = make_pseudo_labels_vi(probs_u, posterior, generator=state.noise_generator)
            breakdown = segpl_vi_loss(
                probs_l, masks_l, probs_u, pseudo, posterior,
                config.prior, alpha_effective, config.kl_weight,
            )
        state.last_sampled_threshold = pseudo.threshold_used

    if not torch.isfinite(breakdown.total):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step + 1}: "
            f"sup={float(breakdown.supervised.detach())} "
            f"unsup={float(breakdown.unsupervised.detach())} "
            f"kl={float(breakdown.kl.detach())} alpha={alpha_effective} "
            f"sampled_T={state.last_sampled_threshold}"
        )
    breakdown.total.backward()
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def validation_iou(model: Backbone, images, masks, scope="per-case", chunk=16) -> float:
    """Mean IoU over a held-out set, evaluated on a parameter snapshot."""
    from .evaluation import iou, predictions_to_masks

    scores = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            batch = _to_tensor(images[start:start + chunk], scope)
            probs = model(batch).probabilities
            pred = predictions_to_masks(probs)
            gt = torch.as_tensor(np.ascontiguousarray(masks[start:start + chunk]))
            for i in range(pred.shape[0]):
                scores.append(iou(pred[i].numpy(), gt[i].numpy()))
    return float(np.mean(scores))


def fit(config: TrainConfig, split: DatasetSplit, out_dir) -> tuple[TrainState, Path]:
    """Run the configured number of steps, logging metrics and checkpoints.

    Writes metrics.csv incrementally (partial rows survive an abort), keeps the
    best-validation checkpoint alongside the final one, and returns the final
    state plus the metrics path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_train_state(config)
    scope = config.normalize_scope
    batches = batch_iterator(
        split, config.labelled_bs, config.ratio,
        seed=config.seed, with_unlabelled=config.mode != "supervised",
    )

    csv_path = out / "metrics.csv"
    t0 = time.monotonic()
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for step_index in range(config.steps):
            alpha_eff = alpha_schedule(step_index, config.steps, config.alpha, config.warmup_fraction)
            raw_l, raw_m, raw_u = next(batches)
            labelled = (
                _to_tensor(raw_l, scope),
                torch.as_tensor(np.ascontiguousarray(raw_m), dtype=torch.float32),
            )
            unlabelled = None if raw_u is None else _to_tensor(raw_u, scope)
            state, breakdown = train_step(state, labelled, unlabelled, config, alpha_eff)

            row = {
                "step": state.step,
                "loss_total": f"{float(breakdown.total.detach()):.6f}",
                "loss_sup": f"{float(breakdown.supervised.detach()):.6f}",
                "loss_unsup": f"{float(breakdown.unsupervised.detach()):.6f}",
                "loss_kl": f"{float(breakdown.kl.detach()):.6f}",
                "alpha_eff": f"{alpha_eff:.6f}",
                "sampled_T": (
                    "" if state.last_sampled_threshold is None
                    else f"{state.last_sampled_threshold:.6f}"
                ),
                "val_iou": "",
                "wall_time_s": f"{time.monotonic() - t0:.3f}",
            }
            if state.step % config.eval_every == 0 or state.step == config.steps:
                val = validation_iou(state.model, split.val_images, split.val_masks, scope)
                row["val_iou"] = f"{val:.6f}"
                if val > state.best_val_iou:
                    state.best_val_iou = val
                    save_checkpoint(
                        state.model, state.head, state.optimizer.state_dict(),
                        state.step, out / "best.ckpt",
                    )
            writer.writerow(row)
            f.flush()

    save_checkpoint(state.model, state.head, state.optimizer.state_dict(), state.step, out / "final.ckpt")
    save_train_config(config, out / "config.txt")
    return state, csv_path


def config_echo(config: TrainConfig) -> dict:
    return asdict(config)
