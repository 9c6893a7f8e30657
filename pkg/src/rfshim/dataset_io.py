"""Binary dataset container (bit-exact round trips).

Layout, version 1, little-endian throughout::

    header : magic "SHIM" | u16 version | u16 flags | u32 record_count
             | u64 rng_seed
    record : u32 N | u32 C
             | u16 id_len | slice_id (UTF-8)
             | f32 voxel_size_mm
             | C*N*N complex64 field samples (re,im interleaved, row-major
               per channel)
             | N*N u8 mask | N*N f32 target
             | u8 has_ref
             | if has_ref: 2C f32 weights [Re..., Im...] | f64 ref_rmse_percent
             | u8 split tag (0=train, 1=val, 2=test)
             | u32 prov_len | provenance (canonical JSON, UTF-8)
    trailer: u32 CRC32 (zlib) of every preceding byte

The reference RMSE is stored as f64 (weights stay f32): records keep the
invariant that the stored RMSE equals a recomputation from the stored
weights, and an f32 RMSE cannot hold that to 1e-9 across a round trip.
All grids are stored at their in-memory precision, so save/load is
bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    FileChecksumError,
    FileFormatError,
    FileTruncatedError,
    FileVersionError,
)
from .fields import Dataset, MultiChannelField, SliceRecord, SPLIT_NAMES, provenance_json
from .objective import ShimWeights

MAGIC = b"SHIM"
VERSION = 1
HEADER_SIZE = 4 + 2 + 2 + 4 + 8
TRAILER_SIZE = 4


def record_payload_size(
    grid_size: int,
    n_channels: int,
    id_len: int,
    prov_len: int,
    has_ref: bool,
) -> int:
    """Exact on-disk size of one record, per the documented layout."""
    size = 4 + 4 + 2 + id_len + 4
    size += n_channels * grid_size * grid_size * 8  # complex64 field
    size += grid_size * grid_size  # u8 mask
    size += grid_size * grid_size * 4  # f32 target
    size += 1  # has_ref
    if has_ref:
        size += 2 * n_channels * 4 + 8
    size += 1  # split tag
    size += 4 + prov_len
    return size


def file_size(dataset: Dataset) -> int:
    """Predicted file size in bytes for ``dataset``."""
    total = HEADER_SIZE + TRAILER_SIZE
    for record in dataset.records:
        total += record_payload_size(
            record.field.grid_size,
            record.field.n_channels,
            len(record.slice_id.encode("utf-8")),
            len(provenance_json(record.provenance).encode("utf-8")),
            record.ref_weights is not None,
        )
    return total


def _encode_record(record: SliceRecord, split_tag: str) -> bytes:
    n = record.field.grid_size
    c = record.field.n_channels
    out = bytearray()
    out += struct.pack("<II", n, c)
    id_bytes = record.slice_id.encode("utf-8")
    out += struct.pack("<H", len(id_bytes)) + id_bytes
    out += struct.pack("<f", record.field.voxel_size_mm)
    out += np.ascontiguousarray(record.field.grids, dtype=np.complex64).tobytes()
    out += np.ascontiguousarray(record.mask, dtype=np.uint8).tobytes()
    out += np.ascontiguousarray(record.target, dtype=np.float32).tobytes()
    if record.ref_weights is not None:
        out += struct.pack("<B", 1)
        out += record.ref_weights.to_real().astype(np.float32).tobytes()
        out += struct.pack("<d", record.ref_rmse_percent)
    else:
        out += struct.pack("<B", 0)
    out += struct.pack("<B", SPLIT_NAMES.index(split_tag))
    prov_bytes = provenance_json(record.provenance).encode("utf-8")
    out += struct.pack("<I", len(prov_bytes)) + prov_bytes
    return bytes(out)


def save_dataset(dataset: Dataset, path) -> None:
    """Serialize ``dataset`` to ``path``; deterministic for identical inputs."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<HHIQ", VERSION, 0, len(dataset.records), dataset.rng_seed)
    for record, tag in zip(dataset.records, dataset.split):
        body += _encode_record(record, tag)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FileTruncatedError(
                f"file ends at byte {len(self.data)} while reading "
                f"{n} bytes at offset {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()


def _decode_record(reader: _Reader) -> tuple[SliceRecord, str]:
    n, c = reader.unpack("II")
    (id_len,) = reader.unpack("H")
    slice_id = reader.take(id_len).decode("utf-8")
    (voxel_size,) = reader.unpack("f")
    grids = reader.array(np.complex64, c * n * n).reshape(c, n, n)
    mask = reader.array(np.uint8, n * n).reshape(n, n).astype(np.bool_)
    target = reader.array(np.float32, n * n).reshape(n, n)
    (has_ref,) = reader.unpack("B")
    ref_weights = None
    ref_rmse = None
    if has_ref:
        theta = reader.array(np.float32, 2 * c).astype(np.float64)
        ref_weights = ShimWeights.from_real(theta)
        (ref_rmse,) = reader.unpack("d")
    (split_idx,) = reader.unpack("B")
    if split_idx >= len(SPLIT_NAMES):
        raise FileFormatError(f"unknown split tag {split_idx}")
    (prov_len,) = reader.unpack("I")
    provenance = json.loads(reader.take(prov_len).decode("utf-8"))
    record = SliceRecord(
        field=MultiChannelField(grids=grids, voxel_size_mm=float(voxel_size)),
        mask=mask,
        target=target,
        slice_id=slice_id,
        provenance=provenance,
        ref_weights=ref_weights,
        ref_rmse_percent=ref_rmse,
    )
    return record, SPLIT_NAMES[split_idx]


def load_dataset(path) -> Dataset:
    """Read a dataset container, verifying magic, version, and checksum.

    Structure is parsed before the CRC so a chopped file reports truncation
    rather than a generic checksum failure; flipped bytes that leave the
    structure intact surface as a checksum error.
    """
    data = Path(path).read_bytes()
    if data[: min(4, len(data))] != MAGIC[: min(4, len(data))] or len(data) < 4:
        raise FileFormatError(f"bad magic {data[:4]!r}; not a dataset file")
    if len(data) < HEADER_SIZE + TRAILER_SIZE:
        raise FileTruncatedError(f"file is only {len(data)} bytes")
    reader = _Reader(data[:-TRAILER_SIZE])
    reader.take(4)
    version, _flags, count, rng_seed = reader.unpack("HHIQ")
    if version != VERSION:
        raise FileVersionError(f"unsupported dataset version {version}")
    records = []
    split = []
    for _ in range(count):
        record, tag = _decode_record(reader)
        records.append(record)
        split.append(tag)
    if reader.pos != len(reader.data):
        raise FileFormatError(
            f"{len(reader.data) - reader.pos} unexpected trailing bytes"
        )
    stored_crc = struct.unpack("<I", data[-TRAILER_SIZE:])[0]
    actual_crc = zlib.crc32(data[:-TRAILER_SIZE])
    if stored_crc != actual_crc:
        raise FileChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    return Dataset(records=records, split=split, rng_seed=rng_seed)
