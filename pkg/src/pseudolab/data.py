"""Synthetic shape datasets, split handling, batch composition and corruption."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

VARIANCE_FLOOR = 1e-8
FG_FRACTION_RANGE = (0.02, 0.6)
MAX_REJECTION_ATTEMPTS = 100

SHAPE_KINDS = ("ellipse", "rectangle", "blob")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic shape-segmentation dataset."""

    image_size: tuple[int, int] = (64, 64)
    num_images: int = 108
    shapes: tuple[str, ...] = SHAPE_KINDS
    fg_intensity_range: tuple[float, float] = (0.5, 0.85)
    bg_intensity_range: tuple[float, float] = (0.2, 0.48)
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("fg_intensity_range", "bg_intensity_range"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError(f"{name} must be an interval inside [0, 1], got ({lo}, {hi})")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")


@dataclass
class DatasetSplit:
    """Disjoint labelled / unlabelled / validation / test pools.

    Unlabelled masks are intentionally absent: only image content may be
    consumed from that pool during training.
    """

    labelled_images: np.ndarray
    labelled_masks: np.ndarray
    unlabelled_images: np.ndarray
    val_images: np.ndarray
    val_masks: np.ndarray
    test_images: np.ndarray
    test_masks: np.ndarray
    ids: dict[str, list[int]] = field(default_factory=dict)


def _render_ellipse(rng, yy, xx, h, w):
    cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
    ry, rx = rng.uniform(0.08 * h, 0.3 * h), rng.uniform(0.08 * w, 0.3 * w)
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(angle) + dx * np.sin(angle)
    v = -dy * np.sin(angle) + dx * np.cos(angle)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _render_rectangle(rng, yy, xx, h, w):
    cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
    hy, hx = rng.uniform(0.06 * h, 0.22 * h), rng.uniform(0.06 * w, 0.22 * w)
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def _render_blob(rng, yy, xx, h, w):
    # ellipse-like region with a smooth radial perturbation of the boundary
    cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
    r0 = rng.uniform(0.1, 0.25) * min(h, w)
    dy, dx = yy - cy, xx - cx
    radius = np.sqrt(dy**2 + dx**2)
    theta = np.arctan2(dy, dx)
    wobble = np.zeros_like(theta)
    for k in range(2, 5):
        wobble += rng.uniform(0.0, 0.25) * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
    return radius <= r0 * (1.0 + wobble)


_RENDERERS = {"ellipse": _render_ellipse, "rectangle": _render_rectangle, "blob": _render_blob}


def generate_synthetic(spec: SyntheticSpec):
    """Render the dataset described by ``spec``.

    Returns ``(images, masks)`` with shape [N, 1, H, W], float32. Images hold
    per-image foreground/background base intensities plus pixel Gaussian noise,
    clipped to [0, 1]; masks are exact, noise-free renderings in {0, 1}.
    Deterministic in ``spec.seed``. Raises if a mask within the foreground
    fraction bounds cannot be drawn in MAX_REJECTION_ATTEMPTS tries.
    """
    h, w = spec.image_size
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frac_lo, frac_hi = FG_FRACTION_RANGE

    images = np.empty((spec.num_images, 1, h, w), dtype=np.float32)
    masks = np.empty((spec.num_images, 1, h, w), dtype=np.float32)
    for n in range(spec.num_images):
        for attempt in range(MAX_REJECTION_ATTEMPTS + 1):
            if attempt == MAX_REJECTION_ATTEMPTS:
                raise RuntimeError(
                    f"image {n}: no mask with foreground fraction in "
                    f"[{frac_lo}, {frac_hi}] after {MAX_REJECTION_ATTEMPTS} attempts"
                )
            mask = np.zeros((h, w), dtype=bool)
            for _ in range(rng.integers(1, 4)):
                kind = spec.shapes[rng.integers(0, len(spec.shapes))]
                mask |= _RENDERERS[kind](rng, yy, xx, h, w)
            if frac_lo <= mask.mean() <= frac_hi:
                break

        fg = rng.uniform(*spec.fg_intensity_range)
        bg = rng.uniform(*spec.bg_intensity_range)
        img = np.where(mask, fg, bg)
        if spec.noise_std > 0:
            img = img + rng.normal(0.0, spec.noise_std, size=(h, w))
        images[n, 0] = np.clip(img, 0.0, 1.0)
        masks[n, 0] = mask

    return images, masks


def split(images, masks, n_labelled, n_unlabelled, n_val, n_test, seed=0) -> DatasetSplit:
    """Partition a dataset into disjoint pools, deterministically in ``seed``."""
    total = n_labelled + n_unlabelled + n_val + n_test
    if n_labelled < 1:
        raise ValueError("labelled pool must be nonempty")
    if total > len(images):
        raise ValueError(f"requested {total} images but dataset holds {len(images)}")
    order = np.random.default_rng(seed).permutation(len(images))
    cuts = np.cumsum([n_labelled, n_unlabelled, n_val, n_test])
    lab, unlab, val, test = np.split(order[:total], cuts)[:4]
    return DatasetSplit(
        labelled_images=images[lab],
        labelled_masks=masks[lab],
        unlabelled_images=images[unlab],
        val_images=images[val],
        val_masks=masks[val],
        test_images=images[test],
        test_masks=masks[test],
        ids={
            "labelled": [int(i) for i in lab],
            "unlabelled": [int(i) for i in unlab],
            "validation": [int(i) for i in val],
            "test": [int(i) for i in test],
        },
    )


def _pool_cycler(n_items, batch_size, rng):
    """Yield index batches, reshuffling the pool on exhaustion."""
    if n_items < 1:
        raise ValueError("empty pool")
    order = rng.permutation(n_items)
    cursor = 0
    while True:
        batch = []
        while len(batch) < batch_size:
            if cursor == len(order):
                order = rng.permutation(n_items)
                cursor = 0
            batch.append(order[cursor])
            cursor += 1
        yield np.asarray(batch)


def batch_iterator(split: DatasetSplit, labelled_bs: int, ratio: int, seed=0, with_unlabelled=True):
    """Stream (labelled images, labelled masks, unlabelled images) sub-batches.

    Every step yields exactly ``labelled_bs`` labelled and ``labelled_bs*ratio``
    unlabelled items; the two pools cycle independently. With
    ``with_unlabelled=False`` the unlabelled pool is never touched and the
    third element is None.
    """
    if ratio < 1 or int(ratio) != ratio:
        raise ValueError("ratio must be an integer >= 1")
    rng = np.random.default_rng(seed)
    labelled = _pool_cycler(len(split.labelled_images), labelled_bs, rng)
    if not with_unlabelled:
        while True:
            idx = next(labelled)
            yield split.labelled_images[idx], split.labelled_masks[idx], None
    else:
        unlabelled_images = split.unlabelled_images
        unlabelled = _pool_cycler(len(unlabelled_images), labelled_bs * ratio, rng)
        while True:
            li = next(labelled)
            ui = next(unlabelled)
            yield split.labelled_images[li], split.labelled_masks[li], unlabelled_images[ui]


def corruption_field(image, contrast_range=(0.4, 2.2), noise_std=0.3, seed=0):
    """Corrupted counterpart x' of ``image``: gamma-curve contrast remap plus
    Gaussian noise. Not clipped; mixing and clipping happen in ood_corrupt."""
    rng = np.random.default_rng(seed)
    exponent = rng.uniform(*contrast_range)
    base = np.clip(image, 0.0, 1.0) ** exponent
    return base + rng.normal(0.0, noise_std, size=image.shape)


def ood_corrupt(image, gamma, contrast_range=(0.4, 2.2), noise_std=0.3, seed=0):
    """Mix-up corruption: gamma * x' + (1 - gamma) * x, clipped to [0, 1].

    gamma=0 returns the original bit-exactly; the corruption field x' depends
    only on (image, contrast_range, noise_std, seed), so sweeping gamma with a
    fixed seed varies the mixing weight of one fixed corruption.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    corrupted = corruption_field(image, contrast_range, noise_std, seed)
    mixed = gamma * corrupted + (1.0 - gamma) * np.asarray(image, dtype=np.float64)
    return np.clip(mixed, 0.0, 1.0).astype(np.float32)


def normalize(images, stats_scope="per-case"):
    """Zero-mean unit-variance normalization (variance floor 1e-8).

    ``per-case`` standardizes each leading-axis item with its own statistics;
    ``global`` uses pooled statistics of the whole array.
    """
    x = np.asarray(images, dtype=np.float32)
    if x.size == 0:
        raise ValueError("cannot normalize an empty array")
    if stats_scope == "per-case":
        axes = tuple(range(1, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
    elif stats_scope == "global":
        mean = x.mean()
        var = x.var()
    else:
        raise ValueError(f"unknown stats_scope: {stats_scope!r}")
    return (x - mean) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))


def normalize_torch(images: torch.Tensor, stats_scope="per-case") -> torch.Tensor:
    """Differentiable counterpart of :func:`normalize` for model inputs."""
    if images.numel() == 0:
        raise ValueError("cannot normalize an empty tensor")
    if stats_scope == "per-case":
        dims = tuple(range(1, images.ndim))
        mean = images.mean(dim=dims, keepdim=True)
        var = images.var(dim=dims, keepdim=True, unbiased=False)
    elif stats_scope == "global":
        mean = images.mean()
        var = images.var(unbiased=False)
    else:
        raise ValueError(f"unknown stats_scope: {stats_scope!r}")
    return (images - mean) / torch.sqrt(torch.clamp(var, min=VARIANCE_FLOOR))


def save_dataset(out_dir, images, masks, split: DatasetSplit, spec: SyntheticSpec | None):
    """Write images/*.arr, masks/*.arr and manifest.json under ``out_dir``.

    The .arr container is the NumPy array format (shape/dtype header followed
    by contiguous values); see README for the exact layout.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for n in range(len(images)):
        with open(out / "images" / f"{n:04d}.arr", "wb") as f:
            np.save(f, images[n])
        with open(out / "masks" / f"{n:04d}.arr", "wb") as f:
            np.save(f, masks[n])
    manifest = {
        "format_version": 1,
        "num_images": int(len(images)),
        "splits": split.ids,
        "synthetic_spec": asdict(spec) if spec is not None else None,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return out / "manifest.json"


def load_dataset(dataset_dir) -> DatasetSplit:
    """Rebuild a DatasetSplit from a directory written by save_dataset."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    ids = manifest["splits"]

    def _load(kind, idx):
        return np.stack([np.load(root / kind / f"{i:04d}.arr") for i in idx])

    return DatasetSplit(
        labelled_images=_load("images", ids["labelled"]),
        labelled_masks=_load("masks", ids["labelled"]),
        unlabelled_images=_load("images", ids["unlabelled"]),
        val_images=_load("images", ids["validation"]),
        val_masks=_load("masks", ids["validation"]),
        test_images=_load("images", ids["test"]),
        test_masks=_load("masks", ids["test"]),
        ids={k: list(v) for k, v in ids.items()},
    )


def load_volume_dir(path, crop, seed=0):
    """Random aligned crops from paired image/mask volume files.

    Expects ``images/*.arr`` and ``masks/*.arr`` with matching stems; each
    volume is [C, *spatial] or [*spatial]. Returns (images, masks) stacked as
    [N, C, *crop]. Crop offsets are deterministic in ``seed`` and shared
    between each image and its mask.
    """
    root = Path(path)
    image_files = sorted((root / "images").glob("*.arr"))
    mask_files = sorted((root / "masks").glob("*.arr"))
    if not image_files:
        raise FileNotFoundError(f"no images/*.arr under {root}")
    image_stems = {f.stem for f in image_files}
    mask_stems = {f.stem for f in mask_files}
    if image_stems != mask_stems:
        odd = sorted(image_stems.symmetric_difference(mask_stems))
        raise ValueError(f"unpaired image/mask files: {odd}")

    crop = tuple(int(c) for c in crop)
    rng = np.random.default_rng(seed)
    images, masks = [], []
    for img_file in image_files:
        img = np.load(img_file)
        msk = np.load(root / "masks" / img_file.name)
        if img.ndim == len(crop):
            img, msk = img[None], msk[None]
        spatial = img.shape[1:]
        if len(spatial) != len(crop):
            raise ValueError(f"{img_file.name}: volume rank {len(spatial)} vs crop rank {len(crop)}")
        for dim, (size, want) in enumerate(zip(spatial, crop)):
            if want > size:
                raise ValueError(f"{img_file.name}: crop {want} exceeds volume size {size} in dim {dim}")
        offsets = [rng.integers(0, size - want + 1) for size, want in zip(spatial, crop)]
        slicer = (slice(None),) + tuple(slice(o, o + c) for o, c in zip(offsets, crop))
        images.append(img[slicer])
        masks.append(msk[slicer])
    return np.stack(images).astype(np.float32), np.stack(masks).astype(np.float32)
