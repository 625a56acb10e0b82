"""Model growth: when to transform, which cells, and the function-preserving ops."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Cell, DimensionError, Model, WeightSet, mac_count


@dataclass
class DocTracker:
    """Loss history of the tracked model plus the degree-of-convergence knobs.

    ``losses[k]`` is the k-th recorded round loss; rounds in which the
    tracked model had no participants are not recorded.
    """

    gamma: int = 10
    delta: int = 5
    beta: float = 0.003
    losses: list = field(default_factory=list)

    def __post_init__(self):
        if self.gamma < 1 or self.delta < 1:
            raise ValueError("gamma and delta must be >= 1")

    def record(self, loss: float) -> None:
        self.losses.append(float(loss))

    def reset(self) -> None:
        self.losses.clear()


def compute_doc(tracker: DocTracker, current_round: Optional[int] = None) -> Optional[float]:
    """Mean of the last ``gamma`` loss slopes, each taken over ``delta`` rounds.

    Positive values mean the loss is still falling. ``None`` until
    ``gamma + delta`` losses exist.
    """
    hist = tracker.losses
    r = len(hist) - 1 if current_round is None else current_round
    g, d = tracker.gamma, tracker.delta
    if r >= len(hist) or r - (g - 1) - d < 0:
        return None
    total = 0.0
    for k in range(g):
        total += (hist[r - k - d] - hist[r - k]) / d
    return total / g


@dataclass
class ActivenessTracker:
    window: int = 5
    buffers: dict = field(default_factory=dict)

    def reset(self) -> None:
        self.buffers.clear()


def cell_activeness(tracker: ActivenessTracker, round_grads: WeightSet, weights: WeightSet) -> dict:
    """Push ``|grad W| / |W|`` per cell and return each cell's windowed mean.

    Norms are Frobenius norms of the weight matrix; biases are ignored. A cell
    with an all-zero weight matrix scores 0.
    """
    out = {}
    for cid, (w, _) in weights.params.items():
        gw, _ = round_grads.params[cid]
        wn = float(np.linalg.norm(w))
        score = float(np.linalg.norm(gw)) / wn if wn > 0 else 0.0
        buf = tracker.buffers.setdefault(cid, deque(maxlen=tracker.window))
        buf.append(score)
        out[cid] = float(np.mean(buf))
    return out


def select_cells(activeness: dict, alpha: float, model: Model) -> list:
    """Cells at or above ``alpha`` times the top activeness, in model order.

    The output cell is never returned. If nothing qualifies, the most active
    hidden cell is (ties go to the lower index).
    """
    if not activeness:
        raise ValueError("activeness is empty")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    hidden = [c.id for c in model.cells[:-1] if c.id in activeness]
    if not hidden:
        raise ValueError("model has no transformable cell")
    top = max(activeness.values())
    chosen = [cid for cid in hidden if activeness[cid] > 0 and activeness[cid] >= alpha * top]
    if not chosen:
        chosen = [max(hidden, key=lambda cid: (activeness[cid], -hidden.index(cid)))]
    return chosen


# -- structural operations ----------------------------------------------------


def _fresh_id(model_id: int, cells) -> str:
    taken = {c.id for c in cells}
    k = 0
    while f"m{model_id}c{k}" in taken:
        k += 1
    return f"m{model_id}c{k}"


def _start_child(parent: Model, child_id: int, created_round: int) -> Model:
    cells = [Cell(c.id, c.in_dim, c.out_dim, c.activation, ("inherited", c.id)) for c in parent.cells]
    return Model(child_id, cells, parent_id=parent.id, created_round=created_round)


def _compose(old, idx):
    return tuple(int(i) for i in idx) if old is None else tuple(old[int(i)] for i in idx)


def _widen(draft: Model, weights: dict, cell_id: str, factor: int, rng, units=None, noise=0.0) -> dict:
    """Widen ``cell_id`` inside ``draft`` in place. Returns the id renames."""
    i = draft.index(cell_id)
    if i == len(draft.cells) - 1:
        raise DimensionError("the output cell cannot be widened")
    if factor < 2 or int(factor) != factor:
        raise ValueError("widen factor must be an integer >= 2")
    cell, succ = draft.cells[i], draft.cells[i + 1]
    d = cell.out_dim
    if units is None:
        units = rng.integers(0, d, size=(factor - 1) * d)
    units = np.asarray(units, dtype=np.int64)
    if units.shape != ((factor - 1) * d,) or units.min() < 0 or units.max() >= d:
        raise ValueError("bad unit sample")
    unit_map = np.concatenate([np.arange(d), units])
    counts = np.bincount(unit_map, minlength=d).astype(np.float64)

    w, b = weights.pop(cell.id)
    sw, sb = weights.pop(succ.id)
    new_cell = Cell(
        _fresh_id(draft.id, draft.cells), cell.in_dim, factor * d, cell.activation,
        ("widened_from", cell.source) if cell.source is not None else cell.origin,
        out_map=_compose(cell.out_map, unit_map) if cell.source is not None else None,
        in_map=cell.in_map,
    )
    draft.cells[i] = new_cell
    new_succ = Cell(
        _fresh_id(draft.id, draft.cells), factor * d, succ.out_dim, succ.activation,
        ("widened_from", succ.source) if succ.source is not None else succ.origin,
        out_map=succ.out_map,
        in_map=_compose(succ.in_map, unit_map) if succ.source is not None else None,
    )
    draft.cells[i + 1] = new_succ
    weights[new_cell.id] = (w[unit_map].copy(), b[unit_map].copy())
    split = sw[:, unit_map] / counts[unit_map]
    if noise > 0:
        split = split + _zero_sum_jitter(split, unit_map, d, noise, rng)
    _exact_fold(split, unit_map, sw)
    weights[new_succ.id] = (split, sb.copy())
    return {cell.id: new_cell.id, succ.id: new_succ.id}


def _exact_fold(split, unit_map, original) -> None:
    """Nudge the last copy of each split column so the copies sum back exactly.

    Summing the copies left to right then reproduces ``original`` bit for
    bit, which makes cropping a fresh child an exact inverse. The nudge is a
    few ulps at most. Exactness can be out of reach when a very large jitter
    makes the copies cancel; the sum is then off by an ulp or so.
    """
    for u in range(original.shape[1]):
        cols = np.flatnonzero(unit_map == u)
        if len(cols) < 2:
            continue
        partial = split[:, cols[0]].copy()
        for c in cols[1:-1]:
            partial = partial + split[:, c]
        target = original[:, u]
        last = target - partial
        for _ in range(8):
            got = partial + last
            off = got != target
            if not off.any():
                break
            last[off] = np.nextafter(last[off], np.where(got[off] < target[off], np.inf, -np.inf))
        split[:, cols[-1]] = last


def _zero_sum_jitter(split, unit_map, d, scale, rng):
    """Noise that cancels across the replicas of each unit.

    Replicas produce identical activations, so only the sum of their
    successor columns matters; zero-sum noise keeps that sum while giving the
    replicas different gradients.
    """
    z = rng.standard_normal(split.shape)
    for u in range(d):
        cols = np.flatnonzero(unit_map == u)
        if len(cols) < 2:
            z[:, cols] = 0.0
        else:
            z[:, cols] -= z[:, cols].mean(axis=1, keepdims=True)
    return scale * np.abs(split) * z


def _deepen(draft: Model, weights: dict, cell_id: str, count: int) -> list:
    i = draft.index(cell_id)
    cell = draft.cells[i]
    if cell.activation != "relu":
        raise ValueError("identity insertion needs a ReLU cell (non-negative outputs)")
    if count < 1:
        raise ValueError("deepen count must be >= 1")
    d = cell.out_dim
    inserted = []
    for k in range(count):
        new = Cell(_fresh_id(draft.id, draft.cells), d, d, "relu", ("inserted_identity", None))
        draft.cells.insert(i + 1 + k, new)
        weights[new.id] = (np.eye(d), np.zeros(d))
        inserted.append(new.id)
    return inserted


def _finish(draft: Model, parent: Model, weights: dict) -> tuple:
    mc = {}
    for c in draft.cells:
        kind = c.origin[0]
        if kind == "inserted_identity":
            mc[c.id] = 0.0
        elif kind == "widened_from":
            mc[c.id] = parent.cell(c.source).n_params / c.n_params
        else:
            mc[c.id] = 1.0
    child = Model(draft.id, list(draft.cells), parent_id=parent.id, per_cell_mc=mc,
                  created_round=draft.created_round)
    return child, WeightSet(child.id, {c.id: weights[c.id] for c in child.cells})


def _copy_params(weights: WeightSet) -> dict:
    return {k: (w.copy(), b.copy()) for k, (w, b) in weights.params.items()}


def widen_cell(model, weights, cell_id, factor=2, rng=None, *, units=None, noise=0.0, child_id=None,
               created_round=0):
    """Function-preserving widening of one hidden cell, as a new child model.

    The cell's original units keep their leading positions; ``(factor-1) *
    out_dim`` extra units are copies of units sampled uniformly with
    replacement (or given explicitly via ``units``). Each successor column is
    divided by its unit's total replication count, so the child computes the
    same function as the parent. ``noise > 0`` adds zero-sum jitter across
    replicas (relative to the column magnitude) to break their symmetry.
    """
    if rng is None and units is None:
        raise ValueError("need an rng or explicit units")
    draft = _start_child(model, model.id + 1 if child_id is None else child_id, created_round)
    params = _copy_params(weights)
    if noise > 0 and rng is None:
        raise ValueError("noise needs an rng")
    _widen(draft, params, cell_id, factor, rng, units, noise)
    return _finish(draft, model, params)


def deepen_cell(model, weights, cell_id, count=1, *, child_id=None, created_round=0):
    """Insert ``count`` identity ReLU cells right after ``cell_id``."""
    draft = _start_child(model, model.id + 1 if child_id is None else child_id, created_round)
    params = _copy_params(weights)
    _deepen(draft, params, cell_id, count)
    return _finish(draft, model, params)


# -- transformation policy ----------------------------------------------------


@dataclass
class TransformConfig:
    alpha: float = 0.9
    widen_factor: int = 2
    deepen_count: int = 1
    symmetry_noise: float = 0.1
    per_cell_next_op: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.widen_factor < 2 or int(self.widen_factor) != self.widen_factor:
            raise ValueError("widen_factor must be an integer >= 2")
        if self.deepen_count < 1:
            raise ValueError("deepen_count must be >= 1")
        if self.symmetry_noise < 0:
            raise ValueError("symmetry_noise must be >= 0")

    def next_op(self, cell_id: str) -> str:
        return self.per_cell_next_op.get(cell_id, "widen")


def _flip(op: str) -> str:
    return "deepen" if op == "widen" else "widen"


def minimal_growth_macs(model: Model, factor: int) -> int:
    """MACs of the cheapest single-cell widening of ``model``."""
    base = mac_count(model)
    best = math.inf
    for a, b in zip(model.cells, model.cells[1:]):
        extra = (factor - 1) * a.out_dim * (a.in_dim + b.out_dim)
        best = min(best, extra)
    return base + best


def should_transform(doc, beta, largest_model, max_capacity, widen_factor=2) -> bool:
    """True when the loss curve has flattened and there is room to grow."""
    if doc is None or doc > beta:
        return False
    if len(largest_model.cells) < 2:
        return False
    return minimal_growth_macs(largest_model, widen_factor) <= max_capacity


def transform_model(parent, parent_weights, activeness, config, rng, *, child_id=None,
                    created_round=0, max_capacity=None, cells=None):
    """Grow ``parent`` into a child model with inherited weights.

    Each selected cell gets its pending operation (widen first, then
    alternating with deepen) and its pending operation is flipped. ``cells``
    overrides the activeness-based selection.

    Returns ``(child, child_weights, ops)`` with ``ops`` a list of
    ``(parent_cell_id, op)``, or ``None`` if the child would exceed
    ``max_capacity``; ``config`` is left untouched in that case.
    """
    selected = list(cells) if cells is not None else select_cells(activeness, config.alpha, parent)
    draft = _start_child(parent, parent.id + 1 if child_id is None else child_id, created_round)
    params = _copy_params(parent_weights)
    current = {c.id: c.id for c in parent.cells}
    state = dict(config.per_cell_next_op)
    new_state = {}
    ops = []
    for pid in selected:
        cid = current[pid]
        op = config.next_op(pid)
        if op == "widen":
            renames = _widen(draft, params, cid, config.widen_factor, rng, noise=config.symmetry_noise)
            for old, new in renames.items():
                for k, v in current.items():
                    if v == old:
                        current[k] = new
        else:
            _deepen(draft, params, cid, config.deepen_count)
        new_state[pid] = _flip(op)
        ops.append((pid, op))
    child, child_weights = _finish(draft, parent, params)
    if max_capacity is not None and mac_count(child) > max_capacity:
        return None
    # alternation state follows each cell into the child
    for pid, cid in current.items():
        state[cid] = new_state.get(pid, state.get(pid, "widen"))
    config.per_cell_next_op = state
    return child, child_weights, ops


def _lineage(models: dict, model_id: int) -> list:
    chain = [model_id]
    while models[chain[-1]].parent_id is not None:
        chain.append(models[chain[-1]].parent_id)
    return chain


def ancestor_path(models: dict, a: int, b: int):
    """Ordered ``(ancestor, descendant)`` ids if one descends from the other."""
    if b in _lineage(models, a):
        return b, a
    if a in _lineage(models, b):
        return a, b
    return None


def trace_cell(models: dict, descendant: int, cell_id: str, ancestor: int):
    """Follow a descendant cell back to ``ancestor``.

    Returns ``(ancestor_cell_id, composed_mc, out_idx, in_idx)`` where the
    index arrays map each descendant unit to an ancestor unit, or ``None`` if
    the cell was inserted somewhere along the way.
    """
    m = models[descendant]
    cell = m.cell(cell_id)
    mc = 1.0
    out_idx = np.arange(cell.out_dim)
    in_idx = np.arange(cell.in_dim)
    while m.id != ancestor:
        mc *= m.per_cell_mc.get(cell.id, 1.0)
        if cell.source is None:
            return None
        if cell.out_map is not None:
            out_idx = np.asarray(cell.out_map)[out_idx]
        if cell.in_map is not None:
            in_idx = np.asarray(cell.in_map)[in_idx]
        m = models[m.parent_id]
        cell = m.cell(cell.source)
    return cell.id, mc, out_idx, in_idx


def model_similarity(a, b, models: dict) -> float:
    """Lineage similarity in [0, 1].

    Per-cell matching degrees are multiplied across generations (a cell
    inserted on the way scores 0), averaged over the descendant's cells and
    clamped at 0. Unrelated models score 0.
    """
    a_id = a.id if isinstance(a, Model) else a
    b_id = b.id if isinstance(b, Model) else b
    if a_id == b_id:
        return 1.0
    path = ancestor_path(models, a_id, b_id)
    if path is None:
        return 0.0
    anc, desc = path
    scores = []
    m = models[desc]
    for c in m.cells:
        score = 1.0
        cur_model, cur = m, c
        while cur_model.id != anc:
            score *= cur_model.per_cell_mc.get(cur.id, 1.0)
            if cur.source is None or score == 0.0:
                break
            cur_model = models[cur_model.parent_id]
            cur = cur_model.cell(cur.source)
        scores.append(score)
    return max(0.0, float(np.mean(scores)))
