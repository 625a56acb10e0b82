"""FedAvg within a model and similarity-weighted sharing across models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DimensionError, Model, WeightSet
from .transform import ancestor_path, model_similarity, trace_cell


@dataclass
class AggregationConfig:
    eta: float = 0.98
    enable_soft: bool = True

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must be in (0, 1)")


def fedavg(updates, previous: WeightSet = None) -> WeightSet:
    """Sample-count weighted mean of ``(WeightSet, count)`` pairs.

    With no updates the previous weights are returned unchanged.
    """
    updates = list(updates)
    if not updates:
        if previous is None:
            raise ValueError("no updates and no previous weights")
        return previous
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ValueError("sample counts must be positive")
    first = updates[0][0]
    out = {}
    for cid in first.params:
        acc_w = acc_b = None
        for ws, n in updates:
            w, b = ws.params[cid]
            if w.shape != first.params[cid][0].shape:
                raise DimensionError(f"update shapes differ on cell {cid}")
            coef = n / total
            if acc_w is None:
                acc_w, acc_b = coef * w, coef * b
            else:
                acc_w = acc_w + coef * w
                acc_b = acc_b + coef * b
        out[cid] = (acc_w, acc_b)
    return WeightSet(first.model_id, out)


def crop_weights(source: WeightSet, source_model: Model, target_model: Model, models: dict) -> dict:
    """Project a descendant's weights onto the shape of one of its ancestors.

    Output units are taken from their leading (original) positions; input
    columns that were split by widening are summed back together, which
    undoes the successor rescaling exactly. Target cells with no descendant
    counterpart are absent from the result.
    """
    path = ancestor_path(models, source_model.id, target_model.id)
    if path != (target_model.id, source_model.id):
        raise ValueError("crop needs the target to be an ancestor of the source")
    out = {}
    for c in source_model.cells:
        traced = trace_cell(models, source_model.id, c.id, target_model.id)
        if traced is None:
            continue
        tid, _, out_idx, in_idx = traced
        tcell = target_model.cell(tid)
        w, b = source.params[c.id]
        rows = np.array([int(np.flatnonzero(out_idx == u)[0]) for u in range(tcell.out_dim)])
        folded = np.zeros((w.shape[0], tcell.in_dim))
        np.add.at(folded.T, in_idx, w.T)
        out[tid] = (folded[rows], b[rows].copy())
    return out


def expand_weights(source: WeightSet, source_model: Model, target_model: Model, models: dict) -> dict:
    """Carry an ancestor's weights into a descendant's coordinates.

    Replays the widening bookkeeping: duplicated output units copy their
    source rows, split input columns are divided by their replication count.
    Cells inserted after the ancestor are absent from the result.
    """
    path = ancestor_path(models, source_model.id, target_model.id)
    if path != (source_model.id, target_model.id):
        raise ValueError("expand needs the source to be an ancestor of the target")
    out = {}
    for c in target_model.cells:
        traced = trace_cell(models, target_model.id, c.id, source_model.id)
        if traced is None:
            continue
        sid, _, out_idx, in_idx = traced
        w, b = source.params[sid]
        counts = np.bincount(in_idx, minlength=w.shape[1]).astype(np.float64)
        out[c.id] = (w[np.ix_(out_idx, in_idx)] / counts[in_idx], b[out_idx].copy())
    return out


def align_weights(source: WeightSet, source_model: Model, target_model: Model, models: dict) -> dict:
    """Source weights in the target's shape, for the cells the two share."""
    if source_model.id == target_model.id:
        return dict(source.params)
    path = ancestor_path(models, source_model.id, target_model.id)
    if path is None:
        return {}
    if path[0] == source_model.id:
        return expand_weights(source, source_model, target_model, models)
    return crop_weights(source, source_model, target_model, models)


def soft_aggregate(models, weights: dict, t: int, config: AggregationConfig, lineage: dict = None,
                   similarities: dict = None) -> dict:
    """Blend every model with the smaller (older) models it descends from.

    For model j and each shared cell::

        w_j <- sum_{i<=j} d_ij s_ij w_i  /  sum_{i<=j} d_ij s_ij

    with ``s_ij`` the lineage similarity, ``d_ij = eta**t`` for ``i != j``
    and 1 for ``i == j``. Larger models never feed smaller ones. ``weights``
    maps model id to the post-FedAvg weights; inputs are not modified.
    """
    models = sorted(models, key=lambda m: m.id)
    lineage = lineage if lineage is not None else {m.id: m for m in models}
    decay = config.eta ** t
    out = {}
    for j, mj in enumerate(models):
        num = {cid: [w, b] for cid, (w, b) in weights[mj.id].params.items()}
        den = {cid: 1.0 for cid in num}
        for mi in models[:j]:
            if similarities is not None:
                sim = similarities.get((mi.id, mj.id), 0.0)
            else:
                sim = model_similarity(mi, mj, lineage)
            coef = decay * sim
            if coef <= 0:
                continue
            aligned = align_weights(weights[mi.id], mi, mj, lineage)
            for cid, (w, b) in aligned.items():
                num[cid][0] = num[cid][0] + coef * w
                num[cid][1] = num[cid][1] + coef * b
                den[cid] += coef
        params = {}
        for cid, (w, b) in num.items():
            if den[cid] == 1.0:
                params[cid] = (w, b)
            else:
                params[cid] = (w / den[cid], b / den[cid])
        out[mj.id] = WeightSet(mj.id, params)
    return out


def update_weights(models, round_updates: dict, previous: dict, t: int, config: AggregationConfig,
                   lineage: dict = None, similarities: dict = None) -> dict:
    """Per-model FedAvg followed by soft aggregation (if enabled).

    ``round_updates`` maps model id to a list of ``(client_id, WeightSet,
    sample_count)``; models without updates keep ``previous`` weights.
    """
    averaged = {}
    for m in models:
        ups = [(ws, n) for _, ws, n in round_updates.get(m.id, [])]
        averaged[m.id] = fedavg(ups, previous[m.id])
    if not config.enable_soft:
        return averaged
    return soft_aggregate(models, averaged, t, config, lineage, similarities)
