import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from mainet.data import (
    Dataset, SynthConfig, balanced_counts, gen_synthetic, load_dataset, save_dataset, split_counts,
    split_dataset, split_indices,
)
from mainet.tensor import ConfigurationError


def probe_accuracy(maps, labels, n_train):
    """Held-out accuracy of a logistic probe on per-channel spatial means."""
    X = maps.mean(axis=(2, 3))
    clf = LogisticRegression(max_iter=2000).fit(X[:n_train], labels[:n_train])
    return clf.score(X[n_train:], labels[n_train:])


class TestGenSynthetic:
    def test_deterministic(self):
        cfg = SynthConfig(n_samples=50, map_size=16, seed=3)
        a, b = gen_synthetic(cfg), gen_synthetic(cfg)
        for x, y in zip(a.maps, b.maps):
            assert x.tobytes() == y.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_seed_changes_data(self):
        a = gen_synthetic(SynthConfig(n_samples=30, map_size=16, seed=0))
        b = gen_synthetic(SynthConfig(n_samples=30, map_size=16, seed=1))
        assert not np.array_equal(a.maps[0], b.maps[0])

    def test_balanced_counts_7089(self):
        assert balanced_counts(7089, (1, 1, 1)) == [2363, 2363, 2363]

    def test_balanced_counts_remainder(self):
        assert balanced_counts(10, (1, 1, 1)) == [4, 3, 3]
        assert sum(balanced_counts(101, (2, 1, 1))) == 101

    def test_shapes(self):
        ds = gen_synthetic(SynthConfig(n_samples=12, map_size=16))
        assert [m.shape for m in ds.maps] == [(12, 3, 16, 16), (12, 2, 16, 16), (12, 1, 16, 16)]
        assert ds.class_counts() == [4, 4, 4]

    def test_probe_isolates_informative_modality(self):
        cfg = SynthConfig(n_samples=600, map_size=16, snr_image=1e3, snr_audio=0.0, snr_wave=0.0, seed=5)
        ds = gen_synthetic(cfg)
        accs = [probe_accuracy(m, ds.labels, 400) for m in ds.maps]
        assert accs[0] >= 0.95
        assert accs[1] <= 0.40 and accs[2] <= 0.40

    def test_class_means_ordered(self):
        ds = gen_synthetic(SynthConfig(n_samples=900, map_size=16, seed=2))
        for m in ds.maps:
            means = [m[ds.labels == c].mean() for c in range(3)]
            assert means[0] > means[1] > means[2]


class TestSplit:
    def test_table_rows(self):
        rows = [split_counts(n) for n in (2409, 2353, 2327)]
        assert rows == [(1927, 241, 241), (1881, 236, 236), (1861, 233, 233)]
        assert tuple(map(sum, zip(*rows))) == (5669, 710, 710)

    def test_dataset_split_totals(self):
        labels = np.repeat([0, 1, 2], [2409, 2353, 2327])
        parts = split_indices(labels, (0.8, 0.1, 0.1), seed=0)
        assert [len(p) for p in parts] == [5669, 710, 710]
        for p, want in zip(parts, [(1927, 1881, 1861), (241, 236, 233), (241, 236, 233)]):
            assert tuple(np.bincount(labels[p])) == want

    def test_ten_samples(self):
        assert split_counts(10) == (8, 1, 1)

    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_too_small(self, n):
        with pytest.raises(ConfigurationError):
            split_counts(n)

    def test_too_small_dataset(self):
        labels = np.array([0, 0, 0, 0, 1, 1])
        with pytest.raises(ConfigurationError):
            split_indices(labels)

    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(3, 60), min_size=1, max_size=3), seed=st.integers(0, 2**16))
    def test_partition(self, counts, seed):
        labels = np.random.default_rng(seed).permutation(np.repeat(np.arange(len(counts)), counts))
        parts = split_indices(labels, (8, 1, 1), seed)
        sets = [set(p.tolist()) for p in parts]
        assert sets[0] | sets[1] | sets[2] == set(range(len(labels)))
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_fraction_and_integer_ratios_agree(self):
        labels = np.repeat([0, 1, 2], [50, 41, 37])
        a = split_indices(labels, (0.8, 0.1, 0.1), 4)
        b = split_indices(labels, (8, 1, 1), 4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_bad_ratio(self):
        with pytest.raises(ConfigurationError):
            split_indices(np.zeros(30, int), (0.5, 0.1, 0.1))

    def test_split_dataset_keeps_samples(self):
        ds = gen_synthetic(SynthConfig(n_samples=30, map_size=16))
        tr, va, te = split_dataset(ds, (8, 1, 1), 0)
        ids = np.sort(np.concatenate([tr.ids, va.ids, te.ids]))
        np.testing.assert_array_equal(ids, np.arange(30))
        i = int(te.ids[0])
        np.testing.assert_array_equal(te.maps[1][0], ds.maps[1][i])
        assert te.labels[0] == ds.labels[i]


class TestDiskRoundTrip:
    def test_round_trip(self, tmp_path):
        ds = gen_synthetic(SynthConfig(n_samples=9, map_size=16))
        manifest = save_dataset(ds, tmp_path, {"config_hash": "abc"})
        back, m2 = load_dataset(tmp_path)
        assert manifest["class_counts"] == [3, 3, 3] and m2["config_hash"] == "abc"
        for x, y in zip(ds.maps, back.maps):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert isinstance(back, Dataset)
