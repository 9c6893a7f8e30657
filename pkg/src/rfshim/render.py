"""Grayscale rendering of field maps as binary PGM (P5) images.

PGM is an uncompressed 8-bit raster with a three-line ASCII header
(``P5``, ``<width> <height>``, ``255``) followed by row-major pixel bytes,
readable by virtually every image tool.

The combined-magnitude view maps ``clamp(|s_v| / m_v, 0, 2)`` linearly onto
0..255 (so a perfect shim renders mid-gray, 128); per-channel views scale by
the maximum channel magnitude. Masked-out voxels are black.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .fields import SliceRecord
from .objective import ShimWeights, combine

GRAY_LEVELS = 256


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write one 8-bit grayscale image."""
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise InvalidArgumentError("pixels must be a 2-D uint8 array")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back an image written by :func:`write_pgm` (used in tests)."""
    data = Path(path).read_bytes()
    match = re.match(rb"P5\n(\d+) (\d+)\n255\n", data)
    if not match:
        raise InvalidArgumentError(f"{path} is not a P5 image from this package")
    w, h = int(match.group(1)), int(match.group(2))
    return np.frombuffer(data[match.end() :], dtype=np.uint8).reshape(h, w)


def combined_view(record: SliceRecord, weights: ShimWeights) -> np.ndarray:
    """Pixel map of the shimmed magnitude relative to the target."""
    magnitude = np.abs(combine(record.field, weights))
    target = np.maximum(record.target.astype(np.float64), 1e-12)
    ratio = np.clip(magnitude / target, 0.0, 2.0)
    pixels = np.minimum(ratio * (GRAY_LEVELS / 2), 255.0)
    return np.where(record.mask, pixels, 0.0).astype(np.uint8)


def channel_views(record: SliceRecord) -> list[np.ndarray]:
    """Per-channel magnitude maps, scaled by the global channel maximum."""
    mags = np.abs(record.field.grids.astype(np.complex128))
    peak = float(mags.max())
    scale = 255.0 / peak if peak > 0 else 0.0
    return [
        np.where(record.mask, mags[c] * scale, 0.0).astype(np.uint8)
        for c in range(record.field.n_channels)
    ]


def safe_name(slice_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "-", slice_id)


def render_record(record: SliceRecord, weights: ShimWeights, out_dir) -> list[Path]:
    """One combined view plus one view per channel; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stem = safe_name(record.slice_id)
    path = out_dir / f"{stem}_combined.pgm"
    write_pgm(path, combined_view(record, weights))
    written.append(path)
    for c, view in enumerate(channel_views(record)):
        path = out_dir / f"{stem}_ch{c}.pgm"
        write_pgm(path, view)
        written.append(path)
    return written
