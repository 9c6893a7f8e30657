"""Shared binary model container.

Layout, version 1, little-endian::

    magic "SHNN" | u16 version | u16 arch_kind
    kind 1 (shim regressor):
        u32 input_channels | u32 grid_size | u32 width_base
        | u32 blocks_per_stage | u32 output_count
    kind 2 (uniformity classifier):
        u32 grid_size | u32 n_conv | u32 widths[n_conv] | f64 threshold
    u64 parameter_count | f64 parameters | u32 CRC32 of all preceding bytes

The declared parameter count must equal both the stored vector length and
the count implied by the architecture fields.
"""

from __future__ import annotations

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

MAGIC = b"SHNN"
VERSION = 1
KIND_PREDICTOR = 1
KIND_NFD = 2


def save_model(model, path) -> None:
    """Serialize a predictor or NFD model; bit-exact on reload."""
    from .nfd import NfdModel
    from .predictor import PredictorModel

    body = bytearray()
    body += MAGIC
    if isinstance(model, PredictorModel):
        body += struct.pack("<HH", VERSION, KIND_PREDICTOR)
        a = model.arch
        body += struct.pack(
            "<IIIII",
            a.input_channels,
            a.grid_size,
            a.width_base,
            a.blocks_per_stage,
            a.output_count,
        )
        params = model.params
    elif isinstance(model, NfdModel):
        body += struct.pack("<HH", VERSION, KIND_NFD)
        a = model.arch
        body += struct.pack("<II", a.grid_size, len(a.widths))
        body += struct.pack(f"<{len(a.widths)}I", *a.widths)
        body += struct.pack("<d", model.threshold)
        params = model.params
    else:
        raise FileFormatError(f"cannot serialize {type(model).__name__}")
    body += struct.pack("<Q", params.size)
    body += np.ascontiguousarray(params, dtype=np.float64).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FileTruncatedError(
                f"model file ends at byte {len(self.data)} while reading "
                f"{n} bytes at offset {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def load_model(path):
    """Load either model kind, verifying structure, counts, and checksum."""
    from .nfd import NfdArch, NfdModel
    from .predictor import PredictorArch, PredictorModel, parameter_count

    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC[: min(4, len(data))] or len(data) < 8:
        raise FileFormatError("not a model file (bad magic)")
    reader = _Reader(data[:-4] if len(data) >= 12 else data)
    reader.take(4)
    version, kind = reader.unpack("HH")
    if version != VERSION:
        raise FileVersionError(f"unsupported model version {version}")
    if kind == KIND_PREDICTOR:
        in_ch, grid, width, blocks, out = reader.unpack("IIIII")
        arch = PredictorArch(
            input_channels=in_ch,
            grid_size=grid,
            width_base=width,
            blocks_per_stage=blocks,
            output_count=out,
        )
        expected = parameter_count(arch)
    elif kind == KIND_NFD:
        grid, n_conv = reader.unpack("II")
        widths = reader.unpack(f"{n_conv}I")
        (threshold,) = reader.unpack("d")
        arch = NfdArch(grid_size=grid, widths=tuple(widths))
        from .nfd import nfd_parameter_count

        expected = nfd_parameter_count(arch)
    else:
        raise FileFormatError(f"unknown model kind {kind}")
    (count,) = reader.unpack("Q")
    if count != expected:
        raise FileFormatError(
            f"header declares {count} parameters but the architecture "
            f"requires {expected}"
        )
    raw = reader.take(count * 8)
    params = np.frombuffer(raw, dtype="<f8").copy()
    if reader.pos != len(reader.data):
        raise FileFormatError(
            f"{len(reader.data) - reader.pos} unexpected trailing bytes"
        )
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise FileChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    if kind == KIND_PREDICTOR:
        return PredictorModel(arch=arch, params=params)
    return NfdModel(arch=arch, params=params, threshold=float(threshold))
