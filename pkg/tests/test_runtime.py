import math

import numpy as np
import pytest

from morphfl import aggregate
from morphfl.model import WeightSet, accuracy, init_weights, local_train, mac_count
from morphfl.runtime import (
    RunConfig,
    build_population,
    final_evaluate,
    initial_state,
    run_round,
    run_training,
)

SMALL = dict(num_clients=12, participants_per_round=6, max_rounds=80)


@pytest.fixture(scope="module")
def small_run():
    return run_training(RunConfig(seed=1, **SMALL))


def fedavg_reference(config):
    """Single-model FedAvg written against the model primitives only."""
    clients, _, model = build_population(config)
    w = init_weights(model, np.random.default_rng([config.seed, 2]))
    for t in range(config.max_rounds):
        chosen = np.random.default_rng([config.seed, t, 0]).choice(len(clients), config.participants_per_round,
                                                                   replace=False)
        results = []
        for cid in chosen:
            c = clients[cid]
            wc, _, _ = local_train(model, w, c.train, config.local_steps, config.batch_size, config.lr,
                                   np.random.default_rng([config.seed, t, 2, int(cid)]))
            results.append((wc, len(c.train[1])))
        total = float(sum(n for _, n in results))
        params = {}
        for cell in model.cells:
            acc_w = acc_b = None
            for ws, n in results:
                cw, cb = ws[cell.id]
                if acc_w is None:
                    acc_w, acc_b = n / total * cw, n / total * cb
                else:
                    acc_w, acc_b = acc_w + n / total * cw, acc_b + n / total * cb
            params[cell.id] = (acc_w, acc_b)
        w = WeightSet(model.id, params)
    return w


class TestConfig:
    def test_defaults_match_desk_scale(self):
        c = RunConfig()
        assert (c.num_clients, c.participants_per_round, c.n_classes, c.feature_dim) == (40, 10, 5, 32)
        assert (c.local_steps, c.batch_size, c.lr, c.max_rounds) == (20, 10, 0.05, 300)
        assert (c.gamma, c.beta, c.delta, c.alpha, c.eta, c.activeness_window) == (10, 0.003, 5, 0.9, 0.98, 5)

    @pytest.mark.parametrize("bad", [dict(participants_per_round=0), dict(max_rounds=-1), dict(ablation="nope"),
                                     dict(participants_per_round=50), dict(eta=1.5), dict(widen_factor=1)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            RunConfig(**bad)

    def test_dict_roundtrip(self):
        c = RunConfig(seed=3, hidden=(4, 2))
        assert RunConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            RunConfig.from_dict({"bogus": 1})


class TestPopulation:
    def test_capacity_spread_and_floor(self):
        clients, probe, m0 = build_population(RunConfig())
        caps = [c.capacity for c in clients]
        assert min(caps) == mac_count(m0)
        assert max(caps) / min(caps) >= 29
        assert len(clients) == 40 and len(probe[1]) > 0

    def test_probe_disjoint_from_clients(self):
        clients, probe, _ = build_population(RunConfig(num_clients=10))
        client_rows = {r.tobytes() for c in clients for part in (c.train, c.test) for r in part[0]}
        assert not any(r.tobytes() in client_rows for r in probe[0])


class TestRound:
    def test_round_zero_single_model(self):
        state = initial_state(RunConfig(seed=2, **SMALL))
        report = run_round(state, 0)
        assigns = [e for e in state.events if e["event"] == "assign"]
        assert len(assigns) == 6 and all(e["model"] == 0 for e in assigns)
        assert report.assigned == {0: 6}

    def test_cost_formula(self):
        cfg = RunConfig(seed=2, **SMALL)
        state = initial_state(cfg)
        report = run_round(state, 0)
        per_client = mac_count(state.models[0]) * cfg.batch_size * cfg.local_steps * 3
        assert report.round_macs == 6 * per_client
        slowest = min(state.clients[e["client"]].speed for e in state.events if e["event"] == "assign")
        assert report.round_time_s == pytest.approx(per_client / slowest)
        assert report.comm_mb == pytest.approx(6 * (2 * state.models[0].n_params * 8 + 8) / 1e6)


class TestTraining:
    def test_zero_rounds(self):
        r = run_training(RunConfig(max_rounds=0, **{k: v for k, v in SMALL.items() if k != "max_rounds"}))
        assert r.total_macs == 0 and r.reports == [] and list(r.models) == [0]

    def test_transformation_fires(self, small_run):
        assert len(small_run.models) >= 2
        assert any(e["event"] == "transform" for e in small_run.events)

    def test_budget_additivity(self, small_run):
        cum = np.cumsum([r.round_macs for r in small_run.reports])
        assert [r.cum_macs for r in small_run.reports] == list(cum)
        assert small_run.total_macs == cum[-1]
        assert all(np.diff(cum) >= 0)

    def test_capacity_safety(self, small_run):
        checked = [e for e in small_run.events if e["event"] in ("assign", "evaluate")]
        assert checked and all(e["macs"] <= e["capacity"] for e in checked)

    def test_every_client_evaluated_once(self, small_run):
        evals = [e["client"] for e in small_run.events if e["event"] == "evaluate"]
        assert sorted(evals) == list(range(12))
        assert set(small_run.accuracies) == set(range(12))

    def test_warm_start(self, small_run):
        for e in (e for e in small_run.events if e["event"] == "transform"):
            assert abs(e["child_probe_loss"] - e["parent_probe_loss"]) <= 1e-6

    def test_child_inherits_parent_utilities(self, small_run):
        for e in (e for e in small_run.events if e["event"] == "transform"):
            snap = small_run.reports[e["round"]].utilities
            child, parent = e["child_id"], e["parent_id"]
            rows = [row for row in snap.values() if child in row]
            assert rows and all(row[child] == row[parent] for row in rows)

    def test_deterministic(self, small_run):
        again = run_training(RunConfig(seed=1, **SMALL))
        assert again.events == small_run.events
        for k in small_run.weights:
            np.testing.assert_array_equal(again.weights[k].flat(), small_run.weights[k].flat())

    def test_threads_do_not_change_results(self, small_run):
        par = run_training(RunConfig(seed=1, threads=3, **SMALL))
        for k in small_run.weights:
            np.testing.assert_array_equal(par.weights[k].flat(), small_run.weights[k].flat())

    def test_no_transform_is_single_model(self):
        r = run_training(RunConfig(seed=1, ablation="no_transform", **SMALL))
        assert list(r.models) == [0]

    def test_fedavg_degeneration(self):
        cfg = RunConfig(seed=4, ablation="no_transform", num_clients=12, participants_per_round=6, max_rounds=25)
        ref = fedavg_reference(cfg)
        got = run_training(cfg).weights[0]
        np.testing.assert_array_equal(got.flat(), ref.flat())

    def test_no_warmup_breaks_preservation(self):
        r = run_training(RunConfig(seed=1, ablation="no_warmup", **SMALL))
        events = [e for e in r.events if e["event"] == "transform"]
        assert events
        assert all(abs(e["child_probe_loss"] - e["parent_probe_loss"]) > 0.1 for e in events)

    def test_no_soft_skips_cross_model_sharing(self, monkeypatch):
        def boom(*a, **k):
            raise AssertionError("soft aggregation used")

        monkeypatch.setattr(aggregate, "soft_aggregate", boom)
        r = run_training(RunConfig(seed=1, ablation="no_soft", **SMALL))
        assert len(r.models) >= 2

    def test_random_cells_still_grows(self):
        r = run_training(RunConfig(seed=1, ablation="random_cells", **SMALL))
        assert len(r.models) >= 2

    def test_stops_when_converged_and_full(self):
        cfg = RunConfig(seed=0, num_clients=12, participants_per_round=6, max_rounds=2000, capacity_ratio=1.0)
        r = run_training(cfg)
        assert len(r.models) == 1
        assert len(r.reports) < 2000 and len(r.reports) % cfg.eval_every == 0


class TestFinalEvaluate:
    def test_tie_goes_to_smaller_and_singleton(self, small_run):
        state = small_run.state
        for c in state.clients:
            for k in state.utilities.row(c.id):
                state.utilities.U[c.id][k] = 0.0
        _, chosen, _ = final_evaluate(state)
        assert all(k == 0 for k in chosen.values())

    def test_highest_utility_wins(self, small_run):
        state = small_run.state
        big = max(state.models)
        capable = [c for c in state.clients if big in state.utilities.row(c.id)]
        assert capable
        for c in capable:
            state.utilities.U[c.id][big] = 5.0
        _, chosen, _ = final_evaluate(state)
        assert all(chosen[c.id] == big for c in capable)

    def test_accuracy_definition(self):
        from morphfl.model import Cell, Model

        m = Model(0, [Cell("a", 1, 2, "none")])
        w = WeightSet(0, {"a": (np.array([[1.0], [-1.0]]), np.zeros(2))})
        x = np.array([[1.0], [2.0], [-1.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        assert accuracy(m, w, x, y) == 0.75

    def test_summary_statistics(self, small_run):
        vals = np.array(list(small_run.accuracies.values()))
        assert small_run.mean_acc == pytest.approx(vals.mean())
        q75, q25 = np.percentile(vals, [75, 25])
        assert small_run.iqr_acc == pytest.approx(q75 - q25)
        assert not math.isnan(small_run.mean_acc)
