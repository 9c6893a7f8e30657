"""Synthetic coil-field generation, masking, augmentation, and datasets.

An analytic surrogate stands in for full-wave EM simulation: each coil on a
ring contributes ``amp(d) * exp(i * (-2*pi*d/wavelength + azimuth))`` at every
voxel, where ``d`` is the in-plane distance from the coil center to the voxel
and ``amp(d) = 1 / (1 + d/decay_scale)``. Short wavelengths relative to the
phantom diameter produce the destructive interference that shimming is meant
to repair.

Grids are stored as ``complex64`` / ``float32`` so dataset round trips are
bit-exact; numerical consumers upcast to double internally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError, InvalidGeometryError

DEFAULT_COILS = 8
DEFAULT_GRID = 101
DEFAULT_RING_RADIUS_MM = 140.0
DEFAULT_WAVELENGTH_MM = 130.0
DEFAULT_DECAY_SCALE_MM = 50.0
DEFAULT_MASK_FRACTION = 0.8
DEFAULT_RADIUS_RANGE_MM = (80.0, 120.0)
# Field of view = FOV_FACTOR * phantom radius, chosen so the default disk
# mask (fraction 0.8) lands exactly on the phantom boundary.
FOV_FACTOR = 2.0 / DEFAULT_MASK_FRACTION

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_SPLIT_RATIO = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class CoilPose:
    """Position of one transmit coil on the mounting ring."""

    azimuth_rad: float
    center_mm: tuple[float, float]


@dataclass(frozen=True)
class MultiChannelField:
    """Per-channel complex B1+ samples on a square grid.

    Attributes:
        grids: (C, N, N) complex64 array, row-major per channel.
        voxel_size_mm: edge length of one voxel.
    """

    grids: np.ndarray
    voxel_size_mm: float

    def __post_init__(self):
        g = self.grids
        if g.ndim != 3 or g.shape[1] != g.shape[2]:
            raise InvalidArgumentError(f"field grids must be (C, N, N), got {g.shape}")
        if g.shape[0] < 1 or g.shape[1] < 2:
            raise InvalidArgumentError("need C >= 1 and N >= 2")
        if g.dtype != np.complex64:
            raise InvalidArgumentError(f"field grids must be complex64, got {g.dtype}")
        if not np.all(np.isfinite(g)):
            raise InvalidArgumentError("field contains non-finite samples")
        if not self.voxel_size_mm > 0:
            raise InvalidArgumentError("voxel_size_mm must be positive")

    @property
    def n_channels(self) -> int:
        return self.grids.shape[0]

    @property
    def grid_size(self) -> int:
        return self.grids.shape[1]


@dataclass(frozen=True)
class SliceRecord:
    """One slice: field, mask, target, and optional reference solution.

    The reference pair is kept internally consistent: ``ref_rmse_percent`` is
    always the RMSE recomputed from ``ref_weights`` on this record (see
    :meth:`with_reference`), and reference weights are quantized to float32
    so persistence cannot break that consistency.
    """

    field: MultiChannelField
    mask: np.ndarray
    target: np.ndarray
    slice_id: str
    provenance: dict = field(default_factory=dict)
    ref_weights: "ShimWeights | None" = None
    ref_rmse_percent: float | None = None

    def __post_init__(self):
        n = self.field.grid_size
        if self.mask.shape != (n, n):
            raise InvalidArgumentError("mask dimensions must match the field")
        if self.mask.dtype != np.bool_:
            raise InvalidArgumentError("mask must be boolean")
        if self.target.shape != (n, n):
            raise InvalidArgumentError("target dimensions must match the field")
        if self.target.dtype != np.float32:
            raise InvalidArgumentError("target must be float32")
        if not np.all(np.isfinite(self.target)) or np.any(self.target < 0):
            raise InvalidArgumentError("target values must be finite and >= 0")
        if (self.ref_weights is None) != (self.ref_rmse_percent is None):
            raise InvalidArgumentError(
                "ref_weights and ref_rmse_percent must be set together"
            )

    @property
    def count_inside(self) -> int:
        return int(self.mask.sum())

    def with_reference(self, weights: "ShimWeights") -> "SliceRecord":
        """Attach reference weights (quantized to float32) and their RMSE."""
        from .objective import rmse_percent

        quantized = weights.quantized_f32()
        rmse = rmse_percent(self.field, quantized, self.mask, self.target)
        return replace(self, ref_weights=quantized, ref_rmse_percent=float(rmse))

    def validate_reference(self, rel_tol: float = 1e-9) -> None:
        """Check that the stored reference RMSE matches a fresh recomputation."""
        from .objective import rmse_percent

        if self.ref_weights is None:
            return
        fresh = rmse_percent(self.field, self.ref_weights, self.mask, self.target)
        denom = max(abs(self.ref_rmse_percent), 1e-300)
        if abs(fresh - self.ref_rmse_percent) / denom > rel_tol:
            raise InvalidArgumentError(
                f"record {self.slice_id}: stored reference RMSE "
                f"{self.ref_rmse_percent} != recomputed {fresh}"
            )


@dataclass
class Dataset:
    """Ordered slice records with split tags and the seed that produced them."""

    records: list[SliceRecord]
    split: list[str]
    rng_seed: int

    def __post_init__(self):
        if len(self.records) != len(self.split):
            raise InvalidArgumentError("one split tag per record required")
        for tag in self.split:
            if tag not in SPLIT_NAMES:
                raise InvalidArgumentError(f"unknown split tag {tag!r}")
        ids = [r.slice_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("slice_ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, tag: str) -> list[SliceRecord]:
        return [r for r, t in zip(self.records, self.split) if t == tag]


def make_coil_geometry(n_coils: int, ring_radius_mm: float) -> list[CoilPose]:
    """Place ``n_coils`` evenly around a ring of radius ``ring_radius_mm``.

    Coil ``k`` sits at azimuth ``2*pi*k/n_coils``, ordered by ``k``.
    """
    if n_coils < 1:
        raise InvalidArgumentError("n_coils must be >= 1")
    if not ring_radius_mm > 0:
        raise InvalidArgumentError("ring_radius_mm must be positive")
    poses = []
    for k in range(n_coils):
        azimuth = 2.0 * math.pi * k / n_coils
        center = (ring_radius_mm * math.cos(azimuth), ring_radius_mm * math.sin(azimuth))
        poses.append(CoilPose(azimuth_rad=azimuth, center_mm=center))
    return poses


def grid_coordinates_mm(grid_size: int, voxel_size_mm: float) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-center coordinates (x, y) in mm, origin at the grid center."""
    half = (grid_size - 1) / 2.0
    axis = (np.arange(grid_size, dtype=np.float64) - half) * voxel_size_mm
    x, y = np.meshgrid(axis, axis, indexing="xy")
    return x, y


def simulate_channel_fields(
    geometry: list[CoilPose],
    grid_size: int,
    phantom_radius_mm: float,
    wavelength_mm: float,
    decay_scale_mm: float = DEFAULT_DECAY_SCALE_MM,
    fov_factor: float = FOV_FACTOR,
) -> MultiChannelField:
    """Analytic per-channel B1+ maps for a coil ring around a disk phantom.

    Channel ``k`` at voxel ``v``::

        amp(d) * exp(i * (-2*pi*d/wavelength + azimuth_k)),  amp(d) = 1/(1 + d/d0)

    with ``d`` the distance from coil ``k``'s center to the voxel. The map is
    deterministic: identical arguments produce bit-identical grids.

    Args:
        geometry: coil poses from :func:`make_coil_geometry`.
        grid_size: N, samples per side (>= 8).
        phantom_radius_mm: disk phantom radius; must be smaller than the
            mounting-ring radius of every coil.
        wavelength_mm: in-tissue RF wavelength; ``math.inf`` disables the
            phase term.
        decay_scale_mm: amplitude decay scale d0.
        fov_factor: field of view = ``fov_factor * phantom_radius_mm``.

    Returns:
        MultiChannelField with ``voxel_size_mm = fov / grid_size``.
    """
    if grid_size < 8:
        raise InvalidArgumentError("grid_size must be >= 8")
    if not wavelength_mm > 0:
        raise InvalidArgumentError("wavelength_mm must be positive")
    if not phantom_radius_mm > 0:
        raise InvalidArgumentError("phantom_radius_mm must be positive")
    if not decay_scale_mm > 0:
        raise InvalidArgumentError("decay_scale_mm must be positive")
    for pose in geometry:
        ring_r = math.hypot(*pose.center_mm)
        if ring_r <= phantom_radius_mm:
            raise InvalidGeometryError(
                f"coil at radius {ring_r:.1f} mm lies inside the "
                f"{phantom_radius_mm:.1f} mm phantom"
            )

    fov_mm = fov_factor * phantom_radius_mm
    voxel_size = fov_mm / grid_size
    x, y = grid_coordinates_mm(grid_size, voxel_size)

    grids = np.empty((len(geometry), grid_size, grid_size), dtype=np.complex64)
    for k, pose in enumerate(geometry):
        cx, cy = pose.center_mm
        d = np.hypot(x - cx, y - cy)
        amp = 1.0 / (1.0 + d / decay_scale_mm)
        phase = -2.0 * math.pi * d / wavelength_mm + pose.azimuth_rad
        grids[k] = (amp * np.exp(1j * phase)).astype(np.complex64)
    return MultiChannelField(grids=grids, voxel_size_mm=voxel_size)


def make_disk_mask(grid_size: int, radius_fraction: float) -> np.ndarray:
    """Boolean disk mask: true where the voxel center lies within
    ``radius_fraction * grid_size / 2`` of the grid center.

    Raises invalid-argument when the resulting mask is empty, since an empty
    region of interest cannot be shimmed.
    """
    if grid_size < 2:
        raise InvalidArgumentError("grid_size must be >= 2")
    if not 0.0 < radius_fraction <= 1.0:
        raise InvalidArgumentError("radius_fraction must lie in (0, 1]")
    half = (grid_size - 1) / 2.0
    axis = np.arange(grid_size, dtype=np.float64) - half
    x, y = np.meshgrid(axis, axis, indexing="xy")
    mask = np.hypot(x, y) <= radius_fraction * grid_size / 2.0
    if not mask.any():
        raise InvalidArgumentError(
            f"disk mask with fraction {radius_fraction} on a {grid_size} grid is empty"
        )
    return mask


def make_target(mask: np.ndarray, level: float = 1.0) -> np.ndarray:
    """Constant desired-magnitude map (``level`` inside the mask, 0 outside)."""
    if not level >= 0:
        raise InvalidArgumentError("target level must be >= 0")
    return np.where(mask, np.float32(level), np.float32(0.0))


def augment_rotate(record: SliceRecord, quarter_turns: int) -> SliceRecord:
    """Rotate field, mask, and target by 90 degrees ``quarter_turns`` times.

    Reference weights are dropped: the coil ring does not rotate with the
    image, so stored weights would silently describe the wrong geometry.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise InvalidArgumentError("quarter_turns must be in 0..3")
    n = record.field.grid_size
    if record.field.grids.shape[1] != record.field.grids.shape[2]:
        raise InvalidArgumentError("rotation requires a square grid")
    k = quarter_turns
    grids = np.ascontiguousarray(np.rot90(record.field.grids, k=k, axes=(1, 2)))
    mask = np.ascontiguousarray(np.rot90(record.mask, k=k))
    target = np.ascontiguousarray(np.rot90(record.target, k=k))
    prov = dict(record.provenance)
    prov["rotated_quarter_turns"] = prov.get("rotated_quarter_turns", 0) + k
    return SliceRecord(
        field=MultiChannelField(grids=grids, voxel_size_mm=record.field.voxel_size_mm),
        mask=mask,
        target=target,
        slice_id=f"{record.slice_id}-rot{k}",
        provenance=prov,
        ref_weights=None,
        ref_rmse_percent=None,
    )


def assign_splits(
    n_records: int,
    rng_seed: int,
    ratio: tuple[float, float, float] = DEFAULT_SPLIT_RATIO,
) -> list[str]:
    """Shuffle-based train/val/test tags, reproducible from the seed.

    Counts follow the largest-remainder rule, so every split size is within
    one record of ``ratio * n_records``.
    """
    if abs(sum(ratio) - 1.0) > 1e-9:
        raise InvalidArgumentError("split ratio must sum to 1")
    exact = [r * n_records for r in ratio]
    counts = [int(math.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(n_records - sum(counts)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0
    order = np.random.default_rng(np.uint64(rng_seed)).permutation(n_records)
    tags = [""] * n_records
    start = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for idx in order[start : start + count]:
            tags[int(idx)] = name
        start += count
    return tags


def generate_slice(
    index: int,
    seed: int,
    n_coils: int = DEFAULT_COILS,
    grid_size: int = DEFAULT_GRID,
    radius_range_mm: tuple[float, float] = DEFAULT_RADIUS_RANGE_MM,
    ring_radius_mm: float = DEFAULT_RING_RADIUS_MM,
    wavelength_mm: float = DEFAULT_WAVELENGTH_MM,
    decay_scale_mm: float = DEFAULT_DECAY_SCALE_MM,
    mask_fraction: float = DEFAULT_MASK_FRACTION,
) -> SliceRecord:
    """Generate one record; the phantom radius is drawn from a per-record
    substream of ``seed`` so records are independent and order-free."""
    lo, hi = radius_range_mm
    if not 0 < lo <= hi:
        raise InvalidArgumentError("radius range must satisfy 0 < lo <= hi")
    if hi >= ring_radius_mm:
        raise InvalidGeometryError("phantom radius range must stay inside the coil ring")
    rng = np.random.default_rng([np.uint64(seed), np.uint64(index)])
    phantom_radius = float(rng.uniform(lo, hi))
    geometry = make_coil_geometry(n_coils, ring_radius_mm)
    fld = simulate_channel_fields(
        geometry,
        grid_size,
        phantom_radius,
        wavelength_mm,
        decay_scale_mm=decay_scale_mm,
        fov_factor=2.0 / mask_fraction,
    )
    mask = make_disk_mask(grid_size, mask_fraction)
    target = make_target(mask)
    provenance = {
        "seed": int(seed),
        "index": int(index),
        "n_coils": int(n_coils),
        "grid_size": int(grid_size),
        "phantom_radius_mm": phantom_radius,
        "ring_radius_mm": float(ring_radius_mm),
        "wavelength_mm": float(wavelength_mm),
        "decay_scale_mm": float(decay_scale_mm),
        "mask_fraction": float(mask_fraction),
    }
    return SliceRecord(
        field=fld,
        mask=mask,
        target=target,
        slice_id=f"s{seed:012d}-{index:06d}",
        provenance=provenance,
    )


def generate_dataset(
    n_slices: int,
    seed: int,
    split_ratio: tuple[float, float, float] = DEFAULT_SPLIT_RATIO,
    workers: int = 1,
    **slice_kwargs,
) -> Dataset:
    """Generate ``n_slices`` records plus reproducible split tags."""
    if n_slices < 1:
        raise InvalidArgumentError("n_slices must be >= 1")
    from .parallel import pmap

    records = pmap(_GenerateSliceTask(seed, slice_kwargs), range(n_slices), workers)
    return Dataset(records=records, split=assign_splits(n_slices, seed, split_ratio), rng_seed=seed)


class _GenerateSliceTask:
    """Picklable wrapper so record generation can run in a process pool."""

    def __init__(self, seed: int, slice_kwargs: dict):
        self.seed = seed
        self.slice_kwargs = slice_kwargs

    def __call__(self, index: int) -> SliceRecord:
        return generate_slice(index, self.seed, **self.slice_kwargs)


def provenance_json(provenance: dict) -> str:
    """Canonical JSON used for persistence (sorted keys, stable floats)."""
    return json.dumps(provenance, sort_keys=True, separators=(",", ":"))
