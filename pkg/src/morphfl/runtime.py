"""The coordinator round loop: assign, train, aggregate, grow, account, evaluate."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import aggregate, clients as cm, datagen
from .model import (
    NumericError,
    WeightSet,
    accuracy,
    cross_entropy,
    forward,
    init_weights,
    local_train,
    mac_count,
    make_model,
)
from .transform import (
    ActivenessTracker,
    DocTracker,
    TransformConfig,
    cell_activeness,
    compute_doc,
    minimal_growth_macs,
    model_similarity,
    select_cells,
    should_transform,
    transform_model,
)

log = logging.getLogger(__name__)

ABLATIONS = ("no_transform", "no_soft", "no_warmup", "random_cells")
BYTES_PER_PARAM = 8


@dataclass
class RunConfig:
    seed: int = 0
    # population and data
    num_clients: int = 40
    n_classes: int = 5
    feature_dim: int = 32
    samples_per_client: tuple = (60, 140)
    dirichlet_h: float = 0.5
    blob_spread: float = 1.0
    class_separation: float = 0.5
    probe_fraction: float = 0.1
    capacity_ratio: float = 29.0
    speed_min: float = 2e4
    speed_max: float = 2e5
    # initial model
    hidden: tuple = (2,)
    # local training
    participants_per_round: int = 10
    max_rounds: int = 300
    lr: float = 0.05
    local_steps: int = 20
    batch_size: int = 10
    backward_multiplier: float = 3.0
    # transformation
    gamma: int = 10
    delta: int = 5
    beta: float = 0.003
    alpha: float = 0.9
    activeness_window: int = 5
    widen_factor: int = 2
    deepen_count: int = 1
    symmetry_noise: float = 0.1
    # aggregation
    eta: float = 0.98
    enable_soft: bool = True
    # stopping
    eval_every: int = 5
    convergence_window: int = 10
    convergence_threshold: float = 0.01
    # component switches
    ablation: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        self.samples_per_client = tuple(self.samples_per_client)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.participants_per_round < 1:
            raise ValueError("participants_per_round must be >= 1")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.participants_per_round > self.num_clients:
            raise ValueError("participants_per_round exceeds num_clients")
        if self.lr <= 0 or self.local_steps < 1 or self.batch_size < 1:
            raise ValueError("lr, local_steps and batch_size must be positive")
        if self.capacity_ratio < 1:
            raise ValueError("capacity_ratio must be >= 1")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if not 0 < self.probe_fraction < 1:
            raise ValueError("probe_fraction must be in (0, 1)")
        # validate the nested configs eagerly
        self.data_config()
        self.transform_config()
        self.aggregation_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_client"] = list(self.samples_per_client)
        d["hidden"] = list(self.hidden)
        return d

    def data_config(self) -> datagen.DataConfig:
        return datagen.DataConfig(
            num_clients=self.num_clients, n_classes=self.n_classes, feature_dim=self.feature_dim,
            samples_per_client=self.samples_per_client, dirichlet_h=self.dirichlet_h,
            blob_spread=self.blob_spread, class_separation=self.class_separation, seed=self.seed,
        )

    def transform_config(self) -> TransformConfig:
        return TransformConfig(alpha=self.alpha, widen_factor=self.widen_factor, deepen_count=self.deepen_count,
                               symmetry_noise=self.symmetry_noise)

    def aggregation_config(self) -> aggregate.AggregationConfig:
        enable = self.enable_soft and self.ablation != "no_soft"
        return aggregate.AggregationConfig(eta=self.eta, enable_soft=enable)

    @property
    def effective_beta(self) -> float:
        return -math.inf if self.ablation == "no_transform" else self.beta


@dataclass
class RoundReport:
    round: int
    model_count: int
    largest_macs: int
    mean_loss: float
    model_losses: dict
    participants: dict
    assigned: dict
    utilities: dict
    doc: Optional[float]
    transformation: Optional[dict]
    round_macs: int
    cum_macs: int
    round_time_s: float
    comm_mb: float


@dataclass
class RunState:
    config: RunConfig
    clients: list
    probe: tuple
    models: dict
    weights: dict
    utilities: cm.UtilityTable
    doc: DocTracker
    activeness: ActivenessTracker
    transform: TransformConfig
    aggregation: aggregate.AggregationConfig
    max_capacity: float
    last_activeness: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    cum_macs: int = 0
    rounds_run: int = 0
    reports: list = field(default_factory=list)
    events: list = field(default_factory=list)
    val_history: dict = field(default_factory=dict)

    @property
    def largest(self):
        return self.models[max(self.models)]

    def sim(self, a: int, b: int) -> float:
        key = (min(a, b), max(a, b))
        if key not in self.similarity:
            self.similarity[key] = model_similarity(a, b, self.models)
        return self.similarity[key]


@dataclass
class RunResult:
    config: RunConfig
    models: dict
    weights: dict
    utilities: dict
    accuracies: dict
    assignments: dict
    mean_acc: float
    iqr_acc: float
    total_macs: int
    reports: list
    events: list
    state: Optional[RunState] = None


def build_population(config: RunConfig):
    """Dataset, probe split, initial model and client registry for a config.

    Returns ``(clients, probe, model0)``.
    """
    dcfg = config.data_config()
    lo, hi = dcfg.samples_per_client
    n_client_samples = config.num_clients * (lo + hi) // 2
    n_total = int(round(n_client_samples / (1.0 - config.probe_fraction)))
    X, y = datagen.generate_dataset(dcfg, n_total)
    rng = np.random.default_rng([config.seed, 1])
    perm = rng.permutation(len(y))
    n_probe = n_total - n_client_samples
    probe_idx, pool_idx = perm[:n_probe], perm[n_probe:]
    probe = (X[probe_idx], y[probe_idx])
    Xp, yp = X[pool_idx], y[pool_idx]
    parts = datagen.partition_dirichlet((Xp, yp), config.num_clients, config.dirichlet_h, rng,
                                        samples_per_client=dcfg.samples_per_client)

    model0 = make_model([config.feature_dim, *config.hidden, config.n_classes], model_id=0)
    cap_min = float(mac_count(model0))
    ccfg = datagen.CapacityConfig(cap_min, cap_min * config.capacity_ratio, config.speed_min, config.speed_max)
    caps = datagen.sample_capacities(ccfg, config.num_clients, np.random.default_rng([config.seed, 3]))
    registry = []
    for cid, ((tr, te), (cap, speed)) in enumerate(zip(parts, caps)):
        registry.append(cm.ClientRecord(cid, cap, speed, (Xp[tr], yp[tr]), (Xp[te], yp[te])))
    return registry, probe, model0


def initial_state(config: RunConfig) -> RunState:
    registry, probe, model0 = build_population(config)
    w0 = init_weights(model0, np.random.default_rng([config.seed, 2]))
    return RunState(
        config=config,
        clients=registry,
        probe=probe,
        models={0: model0},
        weights={0: w0},
        utilities=cm.UtilityTable(registry, 0),
        doc=DocTracker(config.gamma, config.delta, config.effective_beta),
        activeness=ActivenessTracker(config.activeness_window),
        transform=config.transform_config(),
        aggregation=config.aggregation_config(),
        max_capacity=max(c.capacity for c in registry),
    )


def _client_rng(seed, t, stream, cid):
    return np.random.default_rng([seed, t, stream, cid])


def _train_one(state, t, cid, model_id):
    cfg = state.config
    client = state.clients[cid]
    model = state.models[model_id]
    try:
        w, g, loss = local_train(model, state.weights[model_id], client.train, cfg.local_steps,
                                 cfg.batch_size, cfg.lr, _client_rng(cfg.seed, t, 2, cid))
    except NumericError:
        return None
    return w, g, loss


def probe_loss(model, weights, probe) -> float:
    return cross_entropy(forward(model, weights, probe[0]), probe[1])


def _try_transform(state: RunState, t: int):
    cfg = state.config
    parent = state.largest
    pw = state.weights[parent.id]
    child_id = max(state.models) + 1
    rng = np.random.default_rng([cfg.seed, t, 4])
    if cfg.ablation == "random_cells":
        hidden = [c.id for c in parent.cells[:-1]]
        pick = np.random.default_rng([cfg.seed, t, 3]).integers(len(hidden))
        attempts = [[hidden[pick]]]
    else:
        if not state.last_activeness:
            return None
        chosen = select_cells(state.last_activeness, state.transform.alpha, parent)
        attempts = [chosen]
        if len(chosen) > 1:
            attempts.append([max(chosen, key=lambda c: state.last_activeness[c])])
    for cells in attempts:
        out = transform_model(parent, pw, state.last_activeness, state.transform, rng, child_id=child_id,
                              created_round=t, max_capacity=state.max_capacity, cells=cells)
        if out is not None:
            return out
    return None


def run_round(state: RunState, t: int) -> RoundReport:
    """One round; mutates ``state`` and returns the round's report."""
    cfg = state.config
    participants = cm.select_clients(state.clients, cfg.participants_per_round,
                                     np.random.default_rng([cfg.seed, t, 0]))

    assigned = {}
    for cid in participants:
        client = state.clients[cid]
        compat = cm.compatible_models(client, state.models.values())
        utils = [state.utilities.get(cid, k) for k in compat]
        k = compat[cm.sample_model(utils, _client_rng(cfg.seed, t, 1, cid))]
        assigned[cid] = k
        state.events.append({"event": "assign", "round": t, "client": cid, "model": k,
                             "macs": mac_count(state.models[k]), "capacity": client.capacity})

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(lambda c: _train_one(state, t, c, assigned[c]), participants))
    else:
        results = [_train_one(state, t, c, assigned[c]) for c in participants]

    losses, updates, grads = {}, {}, {}
    for cid, res in zip(participants, results):
        if res is None:
            state.events.append({"event": "client_failed", "round": t, "client": cid, "model": assigned[cid]})
            continue
        w, g, loss = res
        n = state.clients[cid].n_train
        losses[cid] = loss
        updates.setdefault(assigned[cid], []).append((cid, w, n))
        grads.setdefault(assigned[cid], []).append((g, n))

    for cid, z in cm.standardize_losses(losses).items():
        cm.update_utilities(state.utilities, cid, assigned[cid], z, state.sim)

    models = [state.models[k] for k in sorted(state.models)]
    state.weights = aggregate.update_weights(models, updates, state.weights, t, state.aggregation,
                                             lineage=state.models,
                                             similarities={(a.id, b.id): state.sim(a.id, b.id)
                                                           for a in models for b in models if a.id < b.id})

    largest = state.largest
    model_losses = {}
    for k, ups in updates.items():
        model_losses[k] = float(np.mean([losses[c] for c, _, _ in ups]))
    if largest.id in model_losses:
        state.doc.record(model_losses[largest.id])
        round_grad = aggregate.fedavg(grads[largest.id])
        state.last_activeness = cell_activeness(state.activeness, round_grad, state.weights[largest.id])
    doc = compute_doc(state.doc)

    event = None
    if should_transform(doc, state.doc.beta, largest, state.max_capacity, state.transform.widen_factor):
        out = _try_transform(state, t)
        if out is not None:
            child, child_w, ops = out
            parent_loss = probe_loss(largest, state.weights[largest.id], state.probe)
            if cfg.ablation == "no_warmup":
                child_w = init_weights(child, np.random.default_rng([cfg.seed, t, 5]))
            child_loss = probe_loss(child, child_w, state.probe)
            state.models[child.id] = child
            state.weights[child.id] = child_w
            cm.register_model(state.utilities, child, largest.id, state.clients)
            state.doc.reset()
            state.activeness.reset()
            state.last_activeness = {}
            event = {"event": "transform", "round": t, "parent_id": largest.id, "child_id": child.id,
                     "ops": [[c, op] for c, op in ops], "macs": mac_count(child),
                     "parent_probe_loss": parent_loss, "child_probe_loss": child_loss}
            state.events.append(event)
            log.info("round %d: model %d -> %d (%d MACs)", t, largest.id, child.id, mac_count(child))

    round_macs = 0
    round_time = 0.0
    comm_bytes = 0
    for cid in participants:
        m = state.models[assigned[cid]]
        macs = int(mac_count(m) * cfg.batch_size * cfg.local_steps * cfg.backward_multiplier)
        round_macs += macs
        round_time = max(round_time, macs / state.clients[cid].speed)
        comm_bytes += 2 * m.n_params * BYTES_PER_PARAM + BYTES_PER_PARAM
    state.cum_macs += round_macs
    state.rounds_run = t + 1

    report = RoundReport(
        round=t,
        model_count=len(state.models),
        largest_macs=mac_count(state.largest),
        mean_loss=float(np.mean(list(losses.values()))) if losses else float("nan"),
        model_losses=model_losses,
        participants={k: len(v) for k, v in updates.items()},
        assigned={k: sum(1 for v in assigned.values() if v == k) for k in sorted(set(assigned.values()))},
        utilities=state.utilities.snapshot(),
        doc=doc,
        transformation=event,
        round_macs=round_macs,
        cum_macs=state.cum_macs,
        round_time_s=round_time,
        comm_mb=comm_bytes / 1e6,
    )
    state.reports.append(report)
    return report


def can_still_grow(state: RunState) -> bool:
    if state.config.effective_beta == -math.inf:
        return False
    return minimal_growth_macs(state.largest, state.transform.widen_factor) <= state.max_capacity


def _record_validation(state: RunState) -> None:
    for k, m in state.models.items():
        acc = accuracy(m, state.weights[k], *state.probe)
        state.val_history.setdefault(k, []).append(acc)


def converged(state: RunState) -> bool:
    """Every model's probe accuracy stalled (<= threshold gain) over the window."""
    win = state.config.convergence_window
    thr = state.config.convergence_threshold
    for k in state.models:
        hist = state.val_history.get(k, [])
        if len(hist) <= win:
            return False
        if max(hist[-win:]) > max(hist[:-win]) + thr:
            return False
    return True


def final_evaluate(state: RunState):
    """Evaluate each client on its highest-utility compatible model.

    Ties go to the smaller (cheaper) model. Returns ``(accuracies,
    assignments, events)``; the first two are keyed by client id. The
    evaluation events are returned rather than appended so the state stays
    resumable.
    """
    accs, chosen, events = {}, {}, []
    for c in state.clients:
        compat = cm.compatible_models(c, state.models.values())
        best = compat[0]
        for k in compat[1:]:
            if state.utilities.get(c.id, k) > state.utilities.get(c.id, best):
                best = k
        chosen[c.id] = best
        accs[c.id] = accuracy(state.models[best], state.weights[best], *c.test)
        events.append({"event": "evaluate", "client": c.id, "model": best,
                       "macs": mac_count(state.models[best]), "capacity": c.capacity,
                       "accuracy": accs[c.id]})
    return accs, chosen, events


def summarize(state: RunState) -> RunResult:
    accs, chosen, eval_events = final_evaluate(state)
    vals = np.array([a for a in accs.values() if not math.isnan(a)])
    q75, q25 = np.percentile(vals, [75, 25])
    return RunResult(
        config=state.config,
        models=dict(state.models),
        weights=dict(state.weights),
        utilities=state.utilities.snapshot(),
        accuracies=accs,
        assignments=chosen,
        mean_acc=float(vals.mean()),
        iqr_acc=float(q75 - q25),
        total_macs=state.cum_macs,
        reports=list(state.reports),
        events=list(state.events) + eval_events,
        state=state,
    )


def run_training(config: RunConfig, on_round: Callable = None, state: RunState = None) -> RunResult:
    """Run rounds until the budget is spent or growth stopped and all models converged.

    ``on_round(state, report)`` is called after every round. Passing a
    ``state`` (e.g. one restored from disk) continues it from
    ``state.rounds_run`` under ``config``.
    """
    if state is None:
        state = initial_state(config)
    else:
        state.config = config
    for t in range(state.rounds_run, config.max_rounds):
        report = run_round(state, t)
        if on_round is not None:
            on_round(state, report)
        if (t + 1) % config.eval_every == 0:
            _record_validation(state)
            if not can_still_grow(state) and converged(state):
                log.info("stopping after round %d: converged", t)
                break
    return summarize(state)
