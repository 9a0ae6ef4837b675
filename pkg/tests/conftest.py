"""Shared fixtures: small network configs and synthetic patch sets.

The synthetic fields are smooth band-limited sinusoid mixtures so that the
coarse grid sample actually determines the fine grid signal; training smokes
on white noise have nothing learnable to converge on.
"""

import numpy as np
import pytest

from hdrsr.refnet import RefNetConfig
from hdrsr.training import PatchStore, apply_dihedral


def textured_field(size=256):
    t = np.linspace(0, 4 * np.pi, size)
    return (
        0.55 * np.sin(t)[:, None] * np.cos(1.3 * t)[None, :]
        + 0.25 * np.cos(2.1 * t)[:, None] * np.sin(0.7 * t)[None, :]
    )


@pytest.fixture
def tiny_net_config():
    """Smallest config that still exercises every architectural element."""
    return RefNetConfig(base_channels=4, unet_depth=2, param_budget=None)


@pytest.fixture
def smoke_net_config():
    """Config sized for training smokes: big enough to fit, small enough to be fast."""
    return RefNetConfig(base_channels=8, unet_depth=2, param_budget=None)


@pytest.fixture
def patch_store_64():
    """64 bounded patches: 8 crops x 8 dihedral augmentations of one field."""
    field = textured_field()
    rng = np.random.default_rng(5)
    lrs, hrs = [], []
    for _ in range(8):
        r, c = rng.integers(0, 256 - 96, 2)
        hr = field[r : r + 96, c : c + 96]
        lr = hr[::2, ::2]
        for aug in range(8):
            lrs.append(apply_dihedral(lr, aug).astype(np.float32))
            hrs.append(apply_dihedral(hr, aug).astype(np.float32))
    return PatchStore(
        np.stack(lrs),
        np.stack(hrs),
        np.repeat(np.arange(8, dtype=np.uint32), 8),
        np.tile(np.arange(8, dtype=np.uint32), 8),
    )


@pytest.fixture
def single_pair_store():
    """One smooth patch pair for capacity (overfit) checks."""
    t = np.linspace(0, 3 * np.pi, 96)
    hr = (
        0.6 * np.sin(t)[:, None] * np.cos(t)[None, :] + 0.2 * np.sin(2 * t)[:, None]
    ).astype(np.float32)
    lr = hr[::2, ::2].copy()
    return PatchStore(
        lr[None], hr[None], np.zeros(1, np.uint32), np.zeros(1, np.uint32)
    )


@pytest.fixture
def smooth_rgb():
    """A 64x64 in-gamut RGB ramp image, values well inside (0, 1)."""
    y, x = np.mgrid[0:64, 0:64] / 63.0
    return np.dstack([0.2 + 0.6 * x, 0.3 + 0.4 * y, 0.25 + 0.5 * x * y])
