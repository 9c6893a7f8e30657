import struct

import numpy as np
import pytest

from rfshim.dataset_io import HEADER_SIZE, TRAILER_SIZE, load_dataset, save_dataset
from rfshim.errors import (
    FileChecksumError,
    FileFormatError,
    FileTruncatedError,
    FileVersionError,
)
from rfshim.fields import Dataset, assign_splits, generate_dataset, provenance_json
from rfshim.solvers import restart_search

from conftest import hard_slice


@pytest.fixture(scope="module")
def small_dataset():
    records = [hard_slice(i, grid=12, mask_fraction=0.9) for i in range(5)]
    records[0] = records[0].with_reference(
        restart_search(records[0], n_restarts=1, steps=60, seed=3).final_weights
    )
    return Dataset(records=records, split=assign_splits(5, 17), rng_seed=17)


def _datasets_equal(a: Dataset, b: Dataset) -> None:
    assert a.rng_seed == b.rng_seed
    assert a.split == b.split
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.slice_id == rb.slice_id
        assert ra.provenance == rb.provenance
        assert np.array_equal(ra.field.grids, rb.field.grids)
        assert np.float32(ra.field.voxel_size_mm) == np.float32(rb.field.voxel_size_mm)
        assert np.array_equal(ra.mask, rb.mask)
        assert np.array_equal(ra.target, rb.target)
        if ra.ref_weights is None:
            assert rb.ref_weights is None
            assert rb.ref_rmse_percent is None
        else:
            assert np.array_equal(ra.ref_weights.values, rb.ref_weights.values)
            assert ra.ref_rmse_percent == rb.ref_rmse_percent


def test_round_trip_bit_exact(tmp_path, small_dataset):
    path = tmp_path / "d.shim"
    save_dataset(small_dataset, path)
    _datasets_equal(small_dataset, load_dataset(path))


def test_round_trip_preserves_reference_invariant(tmp_path, small_dataset):
    path = tmp_path / "d.shim"
    save_dataset(small_dataset, path)
    loaded = load_dataset(path)
    loaded.records[0].validate_reference(rel_tol=1e-9)


def test_save_is_deterministic(tmp_path, small_dataset):
    p1, p2 = tmp_path / "a.shim", tmp_path / "b.shim"
    save_dataset(small_dataset, p1)
    save_dataset(small_dataset, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_file_size_matches_documented_layout(tmp_path):
    # independent arithmetic from the format documentation
    dataset = generate_dataset(100, seed=9, grid_size=8, n_coils=2)
    path = tmp_path / "d.shim"
    save_dataset(dataset, path)
    expected = HEADER_SIZE + TRAILER_SIZE
    for record in dataset.records:
        n, c = record.field.grid_size, record.field.n_channels
        id_len = len(record.slice_id.encode("utf-8"))
        prov_len = len(provenance_json(record.provenance).encode("utf-8"))
        has_ref = record.ref_weights is not None
        expected += (
            4 + 4 + 2 + id_len + 4
            + c * n * n * 8
            + n * n
            + n * n * 4
            + 1 + (2 * c * 4 + 8 if has_ref else 0)
            + 1
            + 4 + prov_len
        )
    assert path.stat().st_size == expected


def test_wrong_magic_rejected(tmp_path, small_dataset):
    path = tmp_path / "d.shim"
    save_dataset(small_dataset, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(FileFormatError):
        load_dataset(path)


def test_unsupported_version_rejected(tmp_path, small_dataset):
    path = tmp_path / "d.shim"
    save_dataset(small_dataset, path)
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(FileVersionError):
        load_dataset(path)


def test_truncated_file_rejected(tmp_path, small_dataset):
    path = tmp_path / "d.shim"
    save_dataset(small_dataset, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FileTruncatedError):
        load_dataset(path)


def test_checksum_failure_rejected(tmp_path, small_dataset):
    path = tmp_path / "d.shim"
    save_dataset(small_dataset, path)
    data = bytearray(path.read_bytes())
    # flip one bit inside a field sample (structure stays parseable)
    data[HEADER_SIZE + 60] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FileChecksumError):
        load_dataset(path)
