"""
Unit tests for corpus persistence, sampling and masking
"""

import json

import numpy as np
import pytest

from adv_koopman.corpus import (
    CorpusMetadata,
    NormalizationStats,
    SnapshotCorpus,
    apply_missing_policy,
    compute_normalization,
    load_corpus,
    mask_indices,
    normalize_corpus,
    parse_region,
    region_after,
    sample_sequence,
    save_corpus,
)
from adv_koopman.exceptions import (
    CorpusTooShortError,
    CorruptCorpusError,
    FormatVersionError,
    ValidationError,
)
from adv_koopman.solvers import FieldSnapshot

from .conftest import ks_metadata, traveling_wave

REPORTED_MASK = [36, 50, 61, 71, 87, 102]


@pytest.fixture
def long_corpus():
    """120 snapshots, the length of a Gray-Scott corpus"""
    return SnapshotCorpus(data=traveling_wave(120), metadata=ks_metadata())


class TestSnapshotCorpus:
    """Test suite for SnapshotCorpus"""

    def test_default_mask(self, ks_corpus):
        assert ks_corpus.missing_mask.shape == (24,)
        assert not ks_corpus.missing_mask.any()
        assert len(ks_corpus.available_indices) == 24

    def test_getitem_returns_snapshot(self, ks_corpus):
        snapshot = ks_corpus[3]
        assert isinstance(snapshot, FieldSnapshot)
        assert snapshot.time_index == 3
        assert snapshot.spatial_shape == (8,)

    def test_mask_length_mismatch(self):
        with pytest.raises(ValidationError, match="Mask length"):
            SnapshotCorpus(
                data=traveling_wave(4), metadata=ks_metadata(), missing_mask=np.zeros(3)
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="disagrees"):
            SnapshotCorpus(data=traveling_wave(4, n_points=16), metadata=ks_metadata())

    def test_unknown_problem(self):
        with pytest.raises(ValidationError, match="problem"):
            CorpusMetadata(
                problem="burgers", snapshot_shape=(8, 1), dt_solver=1, dt_koopman=1, save_every=1
            )


class TestPersistence:
    """Test suite for save_corpus / load_corpus"""

    def test_round_trip_with_mask(self, ks_corpus, tmp_path):
        masked = mask_indices(ks_corpus, [2, 5])
        path = tmp_path / "corpus.bin"
        save_corpus(masked, path)

        loaded = load_corpus(path)
        np.testing.assert_array_equal(loaded.data, masked.data)
        np.testing.assert_array_equal(loaded.missing_mask, masked.missing_mask)
        assert loaded.metadata.snapshot_shape == (8, 1)
        assert loaded.metadata.grid_spacing == pytest.approx(1.0 / 8.0)

    def test_layout_on_disk(self, ks_corpus, tmp_path):
        path = tmp_path / "corpus.bin"
        save_corpus(ks_corpus, path)
        assert path.stat().st_size == 24 * 8 * 4 + 24

        with open(tmp_path / "corpus.bin.json") as fh:
            sidecar = json.load(fh)
        assert sidecar["format_version"] == 1
        assert sidecar["n_snapshots"] == 24
        assert sidecar["data_bytes"] == 24 * 8 * 4
        assert sidecar["dtype"] == "<f4"

    def test_truncated_file(self, ks_corpus, tmp_path):
        path = tmp_path / "corpus.bin"
        save_corpus(ks_corpus, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CorruptCorpusError, match="bytes"):
            load_corpus(path)

    def test_unknown_format_version(self, ks_corpus, tmp_path):
        path = tmp_path / "corpus.bin"
        save_corpus(ks_corpus, path)
        sidecar_path = tmp_path / "corpus.bin.json"
        sidecar = json.loads(sidecar_path.read_text())
        sidecar["format_version"] = 99
        sidecar_path.write_text(json.dumps(sidecar))
        with pytest.raises(FormatVersionError, match="99"):
            load_corpus(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptCorpusError, match="Cannot read"):
            load_corpus(tmp_path / "absent.bin")


class TestSampling:
    """Test suite for sample_sequence"""

    def test_window_shape(self, ks_corpus, rng):
        sample = sample_sequence(ks_corpus, 4, rng)
        assert sample.x_seq.shape == (5, 8, 1)
        assert sample.mask_seq.shape == (5,)
        assert sample.n_S == 4
        np.testing.assert_array_equal(
            sample.x_seq, ks_corpus.data[sample.start_index : sample.start_index + 5]
        )

    def test_every_start_reachable(self, ks_corpus, rng):
        starts = {sample_sequence(ks_corpus, 20, rng).start_index for _ in range(400)}
        assert starts == {0, 1, 2, 3}

    def test_exact_fit(self, ks_corpus, rng):
        assert sample_sequence(ks_corpus, 23, rng).start_index == 0

    def test_too_short(self, ks_corpus, rng):
        with pytest.raises(CorpusTooShortError):
            sample_sequence(ks_corpus, 24, rng)


class TestMissingData:
    """Test suite for masking policies"""

    def test_reported_mask_set(self, long_corpus):
        masked = mask_indices(long_corpus, REPORTED_MASK)
        assert masked.missing_indices.tolist() == REPORTED_MASK
        assert np.all(masked.data[REPORTED_MASK] == 0.0)
        assert not long_corpus.missing_mask.any()

    def test_mask_out_of_range(self, ks_corpus):
        with pytest.raises(ValidationError, match="out of range"):
            mask_indices(ks_corpus, [24])

    def test_five_percent_of_corpus(self, long_corpus):
        masked = apply_missing_policy(long_corpus, 0.05, rng_seed=3)
        assert masked.missing_mask.sum() == 6

    def test_region_after(self, long_corpus):
        masked = apply_missing_policy(long_corpus, 0.5, region=region_after(100), rng_seed=1)
        assert masked.missing_mask.sum() == 9
        assert masked.missing_indices.min() > 100

    def test_seed_determinism(self, long_corpus):
        a = apply_missing_policy(long_corpus, 0.1, rng_seed=5)
        b = apply_missing_policy(long_corpus, 0.1, rng_seed=5)
        np.testing.assert_array_equal(a.missing_mask, b.missing_mask)

    def test_zero_fraction(self, long_corpus):
        assert not apply_missing_policy(long_corpus, 0.0).missing_mask.any()

    def test_empty_region(self, ks_corpus):
        with pytest.raises(ValidationError, match="empty"):
            apply_missing_policy(ks_corpus, 0.1, region=region_after(100))

    @pytest.mark.parametrize("spec,index,expected", [("all", 0, True), ("after:10", 10, False), ("after:10", 11, True)])
    def test_parse_region(self, spec, index, expected):
        assert parse_region(spec)(index) is expected

    def test_parse_region_rejects(self):
        with pytest.raises(ValidationError, match="Unknown mask region"):
            parse_region("before:3")


class TestNormalization:
    """Test suite for per-channel normalization"""

    def test_masked_snapshots_ignored(self, ks_corpus):
        data = ks_corpus.data.copy()
        data[0] = 100.0
        mask = np.zeros(len(data), dtype=bool)
        mask[0] = True
        corpus = SnapshotCorpus(data=data, metadata=ks_corpus.metadata, missing_mask=mask)

        stats = compute_normalization(corpus)
        expected = ks_corpus.data[1:]
        assert stats.mean[0] == pytest.approx(expected.mean(), abs=1e-6)
        assert stats.std[0] == pytest.approx(expected.std(), rel=1e-5)

    def test_normalize_keeps_masked_zero(self, ks_corpus):
        masked = mask_indices(ks_corpus, [4])
        stats = NormalizationStats(mean=np.array([0.5], np.float32), std=np.array([2.0], np.float32))
        normalized = normalize_corpus(masked, stats)
        assert np.all(normalized.data[4] == 0.0)
        np.testing.assert_allclose(normalized.data[3], (masked.data[3] - 0.5) / 2.0, rtol=1e-6)

    def test_invert(self, ks_corpus):
        stats = compute_normalization(ks_corpus)
        np.testing.assert_allclose(stats.invert(stats.apply(ks_corpus.data)), ks_corpus.data, atol=1e-6)

    def test_constant_channel(self, ks_corpus):
        data = np.ones_like(ks_corpus.data)
        stats = compute_normalization(SnapshotCorpus(data=data, metadata=ks_corpus.metadata))
        assert stats.std[0] == 1.0

    def test_stats_round_trip(self):
        stats = NormalizationStats(mean=np.array([1.0, 2.0], np.float32), std=np.array([3.0, 4.0], np.float32))
        restored = NormalizationStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(restored.mean, stats.mean)
        np.testing.assert_array_equal(restored.std, stats.std)
