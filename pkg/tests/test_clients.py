import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from morphfl.clients import (
    ClientRecord,
    UtilityTable,
    compatible_models,
    model_probabilities,
    register_model,
    sample_model,
    select_clients,
    standardize_losses,
    update_utilities,
)
from morphfl.model import Cell, Model


def _client(cid, cap):
    return ClientRecord(cid, cap, 1.0, (np.zeros((1, 1)), np.zeros(1, dtype=int)))


def _model_with_macs(mid, macs):
    # one linear cell of shape macs x 1 has exactly `macs` MACs
    return Model(mid, [Cell(f"x{mid}", 1, macs, "none")])


class TestSelect:
    def test_all_clients_permuted(self):
        reg = [_client(i, 1) for i in range(20)]
        out = select_clients(reg, 20, np.random.default_rng(0))
        assert sorted(out) == list(range(20)) and out != list(range(20))

    def test_deterministic(self):
        reg = list(range(50))
        a = select_clients(reg, 10, np.random.default_rng(3))
        b = select_clients(reg, 10, np.random.default_rng(3))
        assert a == b and len(set(a)) == 10

    def test_zero(self):
        assert select_clients(list(range(5)), 0, np.random.default_rng(0)) == []

    def test_too_many(self):
        with pytest.raises(ValueError):
            select_clients(list(range(3)), 4, np.random.default_rng(0))


class TestCompatible:
    models = [_model_with_macs(0, 50), _model_with_macs(1, 100), _model_with_macs(2, 150)]

    def test_inclusive_bound(self):
        assert compatible_models(_client(0, 100), self.models) == [0, 1]

    def test_floor(self):
        assert compatible_models(_client(0, 50), self.models) == [0]

    def test_unbounded(self):
        assert compatible_models(_client(0, math.inf), self.models) == [0, 1, 2]


class TestSampling:
    def test_symmetric(self):
        np.testing.assert_array_equal(model_probabilities([0.0, 0.0]), [0.5, 0.5])

    def test_ln2(self):
        p = model_probabilities([math.log(2), 0.0])
        assert abs(p[0] - 2 / 3) <= 1e-12 and abs(p[1] - 1 / 3) <= 1e-12

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_model([0, 0, 0, 0], rng) for _ in range(100_000)])
        freq = np.bincount(draws, minlength=4) / draws.size
        assert np.all(np.abs(freq - 0.25) <= 0.01)

    def test_single_option(self):
        assert sample_model([3.0], np.random.default_rng(0)) == 0

    def test_extreme_utilities_do_not_overflow(self):
        p = model_probabilities([1e6, -1e6, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(-20, 20))
    def test_normalized_and_shift_invariant(self, u, shift):
        u = np.clip(u, -30, 30)
        p = model_probabilities(u)
        assert abs(p.sum() - 1) <= 1e-12
        np.testing.assert_allclose(model_probabilities(u + shift), p, rtol=1e-9, atol=1e-15)


class TestStandardize:
    def test_single(self):
        assert standardize_losses({4: 2.5}) == {4: 0.0}

    def test_two(self):
        assert standardize_losses({0: 1.0, 1: 3.0}) == {0: -1.0, 1: 1.0}

    def test_equal(self):
        assert standardize_losses({0: 0.7, 1: 0.7, 2: 0.7}) == {0: 0.0, 1: 0.0, 2: 0.0}

    def test_empty(self):
        assert standardize_losses({}) == {}


class TestUtilityUpdate:
    def _table(self, u0, models=(0,)):
        t = UtilityTable([0], 0)
        t.U[0] = {k: u0 for k in models}
        return t

    def test_direct(self):
        t = update_utilities(self._table(0.0), 0, 0, 1.0, lambda a, b: 1.0)
        assert t.get(0, 0) == -1.0

    def test_hand_value(self):
        t = update_utilities(self._table(0.5), 0, 0, -0.5, lambda a, b: 0.5)
        assert t.get(0, 0) == 0.75

    def test_zero_similarity_unchanged(self):
        t = update_utilities(self._table(0.3, (0, 1)), 0, 1, 2.0, lambda a, b: 1.0 if a == b else 0.0)
        assert t.get(0, 0) == 0.3 and t.get(0, 1) == 0.3 - 2.0

    @given(st.floats(0.01, 10), st.floats(0.01, 1))
    def test_monotonicity(self, mag, sim):
        up = update_utilities(self._table(0.0), 0, 0, -mag, lambda a, b: sim)
        down = update_utilities(self._table(0.0), 0, 0, mag, lambda a, b: sim)
        assert up.get(0, 0) > 0 > down.get(0, 0)


class TestRegister:
    def test_copy(self):
        reg = [_client(0, 1000), _client(1, 1000)]
        t = UtilityTable(reg, 0)
        t.U[0][0], t.U[1][0] = 0.3, -0.1
        register_model(t, _model_with_macs(1, 10), 0, reg)
        assert t.column(1) == {0: 0.3, 1: -0.1}

    def test_incapable(self):
        reg = [_client(0, 5), _client(1, 1000)]
        t = UtilityTable(reg, 0)
        register_model(t, _model_with_macs(1, 10), 0, reg)
        assert 1 not in t.row(0) and t.get(1, 1) == 0.0

    def test_child_sampled_like_parent(self):
        reg = [_client(0, 1000)]
        t = UtilityTable(reg, 0)
        t.U[0][0] = 0.42
        register_model(t, _model_with_macs(1, 10), 0, reg)
        p = model_probabilities([t.get(0, 0), t.get(0, 1)])
        assert p[0] == p[1] == 0.5


def test_speed_must_be_positive():
    with pytest.raises(ValueError):
        ClientRecord(0, 1.0, 0.0, (np.zeros((1, 1)), np.zeros(1)))
