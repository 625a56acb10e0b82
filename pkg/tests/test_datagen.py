import numpy as np
import pytest

from morphfl.datagen import (
    CapacityConfig,
    DataConfig,
    export_clients,
    generate_dataset,
    label_tv_distance,
    partition_dirichlet,
    read_capacities,
    read_client_csv,
    sample_capacities,
    write_client_csv,
)
from morphfl.clients import ClientRecord
from morphfl.model import accuracy, init_weights, local_train, make_model


class TestDataset:
    def test_zero_spread(self):
        X, y = generate_dataset(DataConfig(blob_spread=0.0, num_clients=2), 50)
        for c in np.unique(y):
            rows = X[y == c]
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    def test_deterministic(self):
        a = generate_dataset(DataConfig(seed=4), 300)
        b = generate_dataset(DataConfig(seed=4), 300)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_balanced(self):
        _, y = generate_dataset(DataConfig(n_classes=5), 1000)
        assert set(np.bincount(y)) == {200}

    def test_central_oracle_two_classes(self):
        cfg = DataConfig(n_classes=2, feature_dim=8, class_separation=2.0, seed=1)
        X, y = generate_dataset(cfg, 1200)
        m = make_model([8, 8, 2])
        w = init_weights(m, np.random.default_rng(0))
        w, _, _ = local_train(m, w, (X[:1000], y[:1000]), 500, 20, 0.05, np.random.default_rng(1))
        assert accuracy(m, w, X[1000:], y[1000:]) > 0.95

    def test_validation(self):
        with pytest.raises(ValueError):
            DataConfig(n_classes=1)
        with pytest.raises(ValueError):
            DataConfig(samples_per_client=(5, 20))


class TestPartition:
    def _data(self, n=4000, C=5):
        return generate_dataset(DataConfig(n_classes=C, num_clients=10), n)

    def test_complete_and_disjoint(self):
        X, y = self._data()
        parts = partition_dirichlet((X, y), 20, 0.5, np.random.default_rng(0), samples_per_client=(60, 140))
        idx = np.concatenate([np.concatenate(p) for p in parts])
        assert len(idx) == len(y) and len(np.unique(idx)) == len(y)
        assert all(len(tr) + len(te) >= 10 for tr, te in parts)

    def test_deterministic(self):
        X, y = self._data()
        a = partition_dirichlet((X, y), 10, 0.5, np.random.default_rng(2))
        b = partition_dirichlet((X, y), 10, 0.5, np.random.default_rng(2))
        for (ta, ea), (tb, eb) in zip(a, b):
            np.testing.assert_array_equal(ta, tb)
            np.testing.assert_array_equal(ea, eb)

    def test_large_h_near_global(self):
        X, y = self._data(10_000)
        parts = partition_dirichlet((X, y), 10, 1e6, np.random.default_rng(0))
        glob = np.bincount(y) / len(y)
        for tr, te in parts:
            hist = np.bincount(y[np.concatenate([tr, te])], minlength=5) / (len(tr) + len(te))
            assert np.all(np.abs(hist - glob) <= 0.05)

    def test_small_h_dominant_label(self):
        X, y = self._data(4000)
        shares = []
        for seed in range(10):
            parts = partition_dirichlet((X, y), 20, 0.1, np.random.default_rng(seed))
            for tr, te in parts:
                labels = y[np.concatenate([tr, te])]
                shares.append(np.bincount(labels).max() / len(labels))
        assert np.median(shares) > 0.5

    def test_heterogeneity_monotone_in_h(self):
        X, y = self._data(4000)
        means = []
        for h in (0.05, 0.3, 1.0, 5.0, 100.0):
            tv = []
            for seed in range(20):
                parts = partition_dirichlet((X, y), 20, h, np.random.default_rng([seed, 7]))
                tv += [label_tv_distance(y[np.concatenate(p)], 5) for p in parts]
            means.append(np.mean(tv))
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_too_few_samples(self):
        X, y = self._data(100)
        with pytest.raises(ValueError):
            partition_dirichlet((X, y), 20, 0.5, np.random.default_rng(0))

    def test_bad_h(self):
        X, y = self._data(400)
        with pytest.raises(ValueError):
            partition_dirichlet((X, y), 4, 0.0, np.random.default_rng(0))


class TestCapacities:
    def test_two_clients_are_extremes(self):
        caps = sample_capacities(CapacityConfig(10.0, 290.0), 2, np.random.default_rng(0))
        assert {c for c, _ in caps} == {10.0, 290.0}

    def test_ratio(self):
        caps = sample_capacities(CapacityConfig(10.0, 290.0), 40, np.random.default_rng(1))
        vals = [c for c, _ in caps]
        assert max(vals) / min(vals) >= 29
        assert all(10.0 <= v <= 290.0 for v in vals)

    def test_deterministic(self):
        cfg = CapacityConfig(1.0, 29.0)
        assert sample_capacities(cfg, 30, np.random.default_rng(5)) == sample_capacities(cfg, 30, np.random.default_rng(5))

    def test_validation(self):
        with pytest.raises(ValueError):
            CapacityConfig(5.0, 1.0)


class TestCsv:
    def test_client_roundtrip(self, tmp_path):
        X, y = generate_dataset(DataConfig(feature_dim=3, num_clients=2), 30)
        write_client_csv(tmp_path / "c.csv", X, y)
        header = (tmp_path / "c.csv").read_text().splitlines()[0]
        assert header == "f0,f1,f2,label"
        X2, y2 = read_client_csv(tmp_path / "c.csv")
        np.testing.assert_array_equal(X, X2)
        np.testing.assert_array_equal(y, y2)

    def test_export(self, tmp_path):
        X, y = generate_dataset(DataConfig(feature_dim=2, num_clients=2), 20)
        clients = [ClientRecord(0, 5.0, 2.0, (X[:8], y[:8]), (X[8:10], y[8:10])),
                   ClientRecord(1, 145.0, 3.0, (X[10:18], y[10:18]), (X[18:], y[18:]))]
        export_clients(tmp_path, clients)
        assert read_capacities(tmp_path / "capacities.csv") == [(5.0, 2.0), (145.0, 3.0)]
        X1, y1 = read_client_csv(tmp_path / "client_1.csv")
        np.testing.assert_array_equal(X1, X[10:])
        np.testing.assert_array_equal(y1, y[10:])

    def test_bad_header(self, tmp_path):
        (tmp_path / "c.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_client_csv(tmp_path / "c.csv")
