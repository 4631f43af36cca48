"""Unit tests for synthetic clusters, shifts and dataset files."""
import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import datagen
from datagen import DatasetFormatError, ShiftError, ShiftSpec


@pytest.mark.unit
class TestMakeClusters:
    """Tests for make_clusters."""

    def test_shapes_and_labels(self, small_dataset):
        """n_per_class samples per class, class-major order, severity 0."""
        assert small_dataset.x.shape == (120, 8)
        assert np.bincount(small_dataset.y).tolist() == [40, 40, 40]
        assert small_dataset.y[0] == 0 and small_dataset.y[-1] == 2
        assert small_dataset.meta.severity == 0
        assert not small_dataset.is_shifted

    def test_same_seed_identical(self):
        """Identical arguments give bit-identical datasets."""
        a = datagen.make_clusters(3, 5, 10, 0.4, seed=9)
        b = datagen.make_clusters(3, 5, 10, 0.4, seed=9)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_held_out_split_shares_centers(self):
        """Another sample_seed draws new samples around the same means."""
        a = datagen.make_clusters(3, 5, 200, 0.1, seed=9)
        b = datagen.make_clusters(3, 5, 200, 0.1, seed=9, sample_seed=77)
        assert not np.array_equal(a.x, b.x)
        centers = datagen.class_centers(a.meta)
        for c in range(3):
            assert np.linalg.norm(b.x[b.y == c].mean(axis=0) - centers[c]) < 0.05

    def test_centers_on_sphere(self):
        """Class means lie on the sphere of the default radius."""
        d = datagen.make_clusters(4, 6, 5, 0.5, seed=2)
        centers = datagen.class_centers(d.meta)
        np.testing.assert_allclose(np.linalg.norm(centers, axis=1), datagen.RADIUS_FACTOR * 0.5)

    def test_imbalance_counts(self):
        """Class j gets n * imbalance^(-j/(K-1)) samples."""
        d = datagen.make_clusters(3, 4, 100, 0.5, seed=0, imbalance=4.0)
        assert d.meta.class_counts == [100, 50, 25]
        assert np.bincount(d.y).tolist() == [100, 50, 25]

    @pytest.mark.parametrize("kwargs", [
        {"classes": 1},
        {"dim": 1},
        {"n_per_class": 0},
        {"spread": 0.0},
        {"imbalance": 0.5},
    ])
    def test_invalid_arguments(self, kwargs):
        """Out-of-range arguments raise ValueError."""
        args = {"classes": 3, "dim": 4, "n_per_class": 5, "spread": 0.5, "seed": 0}
        args.update(kwargs)
        with pytest.raises(ValueError):
            datagen.make_clusters(**args)


@pytest.mark.unit
class TestShifts:
    """Tests for ShiftSpec and apply_shift."""

    def test_severity_zero_rejected(self):
        """Severity 0 is reserved for the source distribution."""
        with pytest.raises(ShiftError):
            ShiftSpec("gaussian_noise", 0)

    def test_severity_above_range_rejected(self):
        with pytest.raises(ShiftError):
            ShiftSpec("rotation", 6)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ShiftError):
            ShiftSpec("blur", 2)

    @pytest.mark.parametrize("kind", datagen.SHIFT_KINDS)
    def test_magnitude_increases_with_severity(self, kind):
        """Every schedule is strictly increasing."""
        magnitudes = [ShiftSpec(kind, s).magnitude for s in range(1, 6)]
        assert all(a < b for a, b in zip(magnitudes, magnitudes[1:]))

    @pytest.mark.parametrize("kind", datagen.SHIFT_KINDS)
    def test_labels_untouched(self, small_dataset, kind):
        """Shifts change features only."""
        shifted = datagen.apply_shift(small_dataset, ShiftSpec(kind, 3, seed=1))
        np.testing.assert_array_equal(shifted.y, small_dataset.y)
        assert shifted.meta.shift_kind == kind
        assert shifted.meta.severity == 3
        assert shifted.is_shifted

    def test_shifts_do_not_compose(self, small_dataset):
        """Shifting a shifted dataset raises ShiftError."""
        shifted = datagen.apply_shift(small_dataset, ShiftSpec("mean_shift", 1))
        with pytest.raises(ShiftError):
            datagen.apply_shift(shifted, ShiftSpec("mean_shift", 2))

    def test_mean_shift_displacement(self, small_dataset):
        """mean_shift adds the same seeded vector to every sample."""
        spec = ShiftSpec("mean_shift", 4, seed=3)
        shifted = datagen.apply_shift(small_dataset, spec)
        expected = datagen.shift_vector(spec, 8, small_dataset.meta.spread)
        np.testing.assert_allclose(shifted.x - small_dataset.x, np.broadcast_to(expected, shifted.x.shape), atol=1e-12)
        assert np.linalg.norm(expected) == pytest.approx(2.0 * 0.3)

    def test_rotation_preserves_norms(self, small_dataset):
        """Rotating a plane through the origin keeps every norm."""
        shifted = datagen.apply_shift(small_dataset, ShiftSpec("rotation", 5, seed=2))
        np.testing.assert_allclose(
            np.linalg.norm(shifted.x, axis=1), np.linalg.norm(small_dataset.x, axis=1), rtol=1e-12
        )
        assert not np.allclose(shifted.x, small_dataset.x)

    def test_dropout_fraction(self):
        """feature_dropout zeroes roughly the scheduled fraction of entries."""
        d = datagen.make_clusters(2, 10, 500, 0.5, seed=0)
        shifted = datagen.apply_shift(d, ShiftSpec("feature_dropout", 5, seed=0))
        assert np.mean(shifted.x == 0.0) == pytest.approx(0.45, abs=0.03)

    def test_noise_grows_with_severity(self, small_dataset):
        """Mean displacement of gaussian_noise grows with severity."""
        moves = [
            np.linalg.norm(datagen.apply_shift(small_dataset, ShiftSpec("gaussian_noise", s)).x - small_dataset.x, axis=1).mean()
            for s in range(1, 6)
        ]
        assert all(a < b for a, b in zip(moves, moves[1:]))

    def test_same_spec_same_shift(self, small_dataset):
        """A shift is a deterministic function of its spec."""
        spec = ShiftSpec("feature_scale", 2, seed=5)
        a = datagen.apply_shift(small_dataset, spec)
        b = datagen.apply_shift(small_dataset, spec)
        np.testing.assert_array_equal(a.x, b.x)


@pytest.mark.unit
class TestDatasetFiles:
    """Tests for save_dataset / load_dataset."""

    def test_round_trip_bit_exact(self, temp_dir, small_dataset):
        """load(save(d)) reproduces features, labels and meta exactly."""
        shifted = datagen.apply_shift(small_dataset, ShiftSpec("gaussian_noise", 2, seed=4))
        path, sidecar = datagen.save_dataset(shifted, os.path.join(temp_dir, "d.ncds"))
        loaded = datagen.load_dataset(path)
        np.testing.assert_array_equal(loaded.x, shifted.x)
        np.testing.assert_array_equal(loaded.y, shifted.y)
        assert loaded.meta == shifted.meta
        with open(sidecar, encoding="utf-8") as f:
            meta = json.load(f)
        assert meta["format_version"] == datagen.DATASET_FORMAT_VERSION
        assert meta["shift_kind"] == "gaussian_noise"
        assert datagen.dataset_exists(path)

    def test_bad_magic(self, temp_dir, small_dataset):
        """A corrupted magic number is reported."""
        path, _ = datagen.save_dataset(small_dataset, os.path.join(temp_dir, "d.ncds"))
        with open(path, "r+b") as f:
            f.write(b"XXXX")
        with pytest.raises(DatasetFormatError, match="magic"):
            datagen.load_dataset(path)

    def test_truncated(self, temp_dir, small_dataset):
        """A truncated file is reported."""
        path, _ = datagen.save_dataset(small_dataset, os.path.join(temp_dir, "d.ncds"))
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-10])
        with pytest.raises(DatasetFormatError):
            datagen.load_dataset(path)

    def test_flipped_byte_fails_checksum(self, temp_dir, small_dataset):
        """Any flipped payload byte fails the CRC."""
        path, _ = datagen.save_dataset(small_dataset, os.path.join(temp_dir, "d.ncds"))
        with open(path, "rb") as f:
            raw = bytearray(f.read())
        raw[len(raw) // 2] ^= 0xFF
        with open(path, "wb") as f:
            f.write(bytes(raw))
        with pytest.raises(DatasetFormatError, match="checksum"):
            datagen.load_dataset(path)
