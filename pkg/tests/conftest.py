import numpy as np
import pytest
import torch

from pseudolab.data import DatasetSplit, SyntheticSpec, generate_synthetic, split
from pseudolab.trainer import TrainConfig


@pytest.fixture(scope="session")
def desk_dataset() -> DatasetSplit:
    """The shipped synthetic preset: 108 images, 4/64/8/32 split."""
    images, masks = generate_synthetic(SyntheticSpec(seed=0))
    return split(images, masks, 4, 64, 8, 32, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset() -> DatasetSplit:
    """16x16 images, small pools; enough to drive the training machinery fast."""
    spec = SyntheticSpec(image_size=(16, 16), num_images=20, seed=1)
    images, masks = generate_synthetic(spec)
    return split(images, masks, 3, 9, 2, 4, seed=1)


def tiny_config(**overrides) -> TrainConfig:
    defaults = dict(
        mode="segpl", labelled_bs=2, lr=0.01, steps=3, ratio=2,
        eval_every=2, seed=0, base_width=2, depth=1,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def zero_parameters(module: torch.nn.Module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def rand_probs(shape, seed=0, lo=0.05, hi=0.95):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.uniform(lo, hi, size=shape), dtype=torch.float64)
