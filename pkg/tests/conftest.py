"""Shared builders for synthetic test instances."""

import numpy as np
import pytest

from rfshim.fields import MultiChannelField, SliceRecord, make_disk_mask, make_target
from rfshim.objective import ShimWeights


def random_field(rng, n_channels=3, grid=8):
    grids = (
        rng.normal(size=(n_channels, grid, grid))
        + 1j * rng.normal(size=(n_channels, grid, grid))
    ).astype(np.complex64)
    return MultiChannelField(grids=grids, voxel_size_mm=1.0)


def random_record(rng, n_channels=3, grid=8, mask_fraction=0.9, slice_id=None):
    field = random_field(rng, n_channels, grid)
    mask = make_disk_mask(grid, mask_fraction)
    return SliceRecord(
        field=field,
        mask=mask,
        target=make_target(mask),
        slice_id=slice_id or f"rand-{rng.integers(1 << 32)}",
    )


def hard_slice(index, seed=7, grid=24, **kwargs):
    """Generated slice with short-wavelength defaults that make shimming
    genuinely nonconvex (the regime the solver tests care about)."""
    from rfshim.fields import generate_slice

    kwargs.setdefault("wavelength_mm", 80.0)
    kwargs.setdefault("decay_scale_mm", 50.0)
    return generate_slice(index, seed, grid_size=grid, **kwargs)


def weights_of(values):
    return ShimWeights(values=np.asarray(values, dtype=np.complex128))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
