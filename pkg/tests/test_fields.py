import math

import numpy as np
import pytest

from rfshim.errors import InvalidArgumentError, InvalidGeometryError
from rfshim.fields import (
    Dataset,
    assign_splits,
    augment_rotate,
    generate_dataset,
    generate_slice,
    make_coil_geometry,
    make_disk_mask,
    make_target,
    simulate_channel_fields,
)
from rfshim.objective import combine, quadrature_weights

from conftest import hard_slice


class TestCoilGeometry:
    def test_eight_coils_at_45_degree_spacing(self):
        poses = make_coil_geometry(8, 140.0)
        azimuths = [math.degrees(p.azimuth_rad) for p in poses]
        assert azimuths == pytest.approx([0, 45, 90, 135, 180, 225, 270, 315])
        for pose in poses:
            assert math.hypot(*pose.center_mm) == pytest.approx(140.0)

    def test_four_coils(self):
        azimuths = [math.degrees(p.azimuth_rad) for p in make_coil_geometry(4, 100.0)]
        assert azimuths == pytest.approx([0, 90, 180, 270])

    def test_single_coil(self):
        poses = make_coil_geometry(1, 100.0)
        assert len(poses) == 1
        assert poses[0].azimuth_rad == 0.0

    def test_zero_coils_rejected(self):
        with pytest.raises(InvalidArgumentError):
            make_coil_geometry(0, 100.0)


class TestSimulate:
    def test_single_coil_magnitude_decreases_along_radial_line(self):
        geometry = make_coil_geometry(1, 140.0)
        field = simulate_channel_fields(geometry, 33, 100.0, 130.0)
        n = field.grid_size
        # row through the grid center, moving away from the coil at +x
        row = np.abs(field.grids[0][n // 2, :].astype(np.complex128))
        assert np.all(np.diff(row) > 0)  # increasing toward the coil side

    def test_opposed_coils_long_wavelength_symmetric_under_180(self):
        from conftest import weights_of

        geometry = make_coil_geometry(2, 140.0)
        field = simulate_channel_fields(geometry, 32, 100.0, math.inf)
        mag = np.abs(combine(field, weights_of([1.0, 1.0])))
        assert np.allclose(mag, np.rot90(mag, 2), rtol=1e-12, atol=1e-12)

    def test_default_config_exhibits_destructive_interference(self):
        # oracle: coefficient of variation computed directly from the map
        geometry = make_coil_geometry(8, 140.0)
        field = simulate_channel_fields(geometry, 101, 100.0, 130.0)
        mask = make_disk_mask(101, 0.8)
        vals = np.abs(combine(field, quadrature_weights(8)))[mask]
        assert vals.std() / vals.mean() > 0.05

    def test_coil_inside_phantom_rejected(self):
        geometry = make_coil_geometry(8, 90.0)
        with pytest.raises(InvalidGeometryError):
            simulate_channel_fields(geometry, 32, 100.0, 130.0)

    def test_generation_is_deterministic(self):
        geometry = make_coil_geometry(8, 140.0)
        a = simulate_channel_fields(geometry, 32, 95.0, 130.0)
        b = simulate_channel_fields(geometry, 32, 95.0, 130.0)
        assert np.array_equal(a.grids, b.grids)
        assert a.voxel_size_mm == b.voxel_size_mm


class TestDiskMask:
    def test_tiny_grid_center(self):
        mask = make_disk_mask(3, 1.0)
        assert mask[1, 1]

    def test_count_matches_brute_force_scan(self):
        mask = make_disk_mask(101, 0.8)
        expected = 0
        for i in range(101):
            for j in range(101):
                if math.hypot(i - 50.0, j - 50.0) <= 40.4:
                    expected += 1
        assert int(mask.sum()) == expected

    def test_empty_mask_rejected(self):
        with pytest.raises(InvalidArgumentError):
            make_disk_mask(2, 0.01)

    @pytest.mark.parametrize("fraction", [0.0, -0.5, 1.5])
    def test_bad_fraction_rejected(self, fraction):
        with pytest.raises(InvalidArgumentError):
            make_disk_mask(16, fraction)


class TestAugmentRotate:
    def test_zero_turns_keeps_grids_bit_identical(self):
        record = hard_slice(0)
        rotated = augment_rotate(record, 0)
        assert np.array_equal(rotated.field.grids, record.field.grids)
        assert np.array_equal(rotated.mask, record.mask)
        assert np.array_equal(rotated.target, record.target)
        assert rotated.slice_id != record.slice_id

    def test_half_turn_twice_is_identity(self):
        record = hard_slice(1)
        twice = augment_rotate(augment_rotate(record, 2), 2)
        assert np.array_equal(twice.field.grids, record.field.grids)
        assert np.array_equal(twice.mask, record.mask)

    def test_four_quarter_turns_identity(self):
        record = hard_slice(2)
        result = record
        for _ in range(4):
            result = augment_rotate(result, 1)
        assert np.array_equal(result.field.grids, record.field.grids)
        assert np.array_equal(result.target, record.target)

    def test_mask_count_preserved(self):
        record = hard_slice(3)
        for k in range(4):
            assert augment_rotate(record, k).count_inside == record.count_inside

    def test_reference_dropped_and_id_suffixed(self):
        from rfshim.solvers import restart_search

        record = hard_slice(4, grid=16)
        record = record.with_reference(
            restart_search(record, n_restarts=1, steps=50, seed=0).final_weights
        )
        rotated = augment_rotate(record, 1)
        assert rotated.ref_weights is None
        assert rotated.ref_rmse_percent is None
        assert rotated.slice_id.endswith("-rot1")


class TestDatasetSplits:
    def test_fractions_within_one_record(self):
        for n in (10, 23, 499):
            tags = assign_splits(n, rng_seed=3)
            for name, ratio in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
                assert abs(tags.count(name) - ratio * n) <= 1

    def test_split_reproducible(self):
        assert assign_splits(100, rng_seed=42) == assign_splits(100, rng_seed=42)
        assert assign_splits(100, rng_seed=42) != assign_splits(100, rng_seed=43)

    def test_generate_dataset_unique_ids_and_dims(self):
        dataset = generate_dataset(6, seed=11, grid_size=16)
        ids = {r.slice_id for r in dataset.records}
        assert len(ids) == 6
        for record in dataset.records:
            n = record.field.grid_size
            assert record.mask.shape == (n, n)
            assert record.target.shape == (n, n)

    def test_generate_slice_deterministic_across_workers(self):
        serial = generate_dataset(4, seed=5, grid_size=16, workers=1)
        parallel = generate_dataset(4, seed=5, grid_size=16, workers=2)
        for a, b in zip(serial.records, parallel.records):
            assert a.slice_id == b.slice_id
            assert np.array_equal(a.field.grids, b.field.grids)

    def test_duplicate_ids_rejected(self):
        record = generate_slice(0, seed=1, grid_size=16)
        with pytest.raises(InvalidArgumentError):
            Dataset(records=[record, record], split=["train", "train"], rng_seed=1)


class TestRecordInvariants:
    def test_reference_consistency_enforced(self):
        record = hard_slice(5, grid=16)
        with pytest.raises(InvalidArgumentError):
            # rmse without weights violates the pairing invariant
            from dataclasses import replace

            replace(record, ref_rmse_percent=5.0)

    def test_with_reference_recomputes_exactly(self):
        from rfshim.solvers import restart_search

        record = hard_slice(6, grid=16)
        weights = restart_search(record, n_restarts=1, steps=100, seed=2).final_weights
        record = record.with_reference(weights)
        record.validate_reference(rel_tol=1e-9)

    def test_target_default_level(self):
        mask = make_disk_mask(8, 0.9)
        target = make_target(mask)
        assert target[mask].min() == 1.0
        assert target[~mask].max() == 0.0
