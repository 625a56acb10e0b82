"""On-disk formats: model checkpoints, metrics CSV, event log, summary and run state.

Everything is plain text. Floats go through ``repr`` (JSON does the same), so
every file round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from pathlib import Path

import numpy as np

from .clients import UtilityTable
from .model import Cell, Model, WeightSet, mac_count

CHECKPOINT_FORMAT = "morphfl-model"
CHECKPOINT_VERSION = 1
STATE_FORMAT = "morphfl-state"
STATE_VERSION = 1

METRICS_COLUMNS = ["round", "model_count", "largest_macs", "mean_loss", "doc", "cum_macs", "round_time_s", "comm_mb"]
ASSIGNMENT_COLUMNS = ["round", "model", "assigned", "trained"]
UTILITY_COLUMNS = ["round", "client", "model", "utility"]


class FormatError(ValueError):
    """A file on disk does not match the expected layout."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- model checkpoints ------------------------------------------------------


def model_to_dict(model: Model, weights: WeightSet) -> dict:
    cells = []
    for c in model.cells:
        w, b = weights[c.id]
        cells.append({
            "id": c.id,
            "in_dim": c.in_dim,
            "out_dim": c.out_dim,
            "activation": c.activation,
            "origin": list(c.origin),
            "out_map": None if c.out_map is None else list(c.out_map),
            "in_map": None if c.in_map is None else list(c.in_map),
            "mc": model.per_cell_mc.get(c.id),
            "weight": [float(v) for v in w.ravel()],
            "bias": [float(v) for v in b],
        })
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "id": model.id,
        "parent_id": model.parent_id,
        "created_round": model.created_round,
        "macs": mac_count(model),
        "cells": cells,
    }


def model_from_dict(d: dict):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"not a model checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {d.get('version')!r}")
    cells, params, mc = [], {}, {}
    for cd in d["cells"]:
        cell = Cell(
            cd["id"], cd["in_dim"], cd["out_dim"], cd["activation"], tuple(cd["origin"]),
            None if cd["out_map"] is None else tuple(cd["out_map"]),
            None if cd["in_map"] is None else tuple(cd["in_map"]),
        )
        w = np.array(cd["weight"], dtype=np.float64).reshape(cell.out_dim, cell.in_dim)
        b = np.array(cd["bias"], dtype=np.float64)
        if b.shape != (cell.out_dim,):
            raise FormatError(f"cell {cell.id}: bias has {b.size} entries, expected {cell.out_dim}")
        cells.append(cell)
        params[cell.id] = (w, b)
        if cd.get("mc") is not None:
            mc[cell.id] = cd["mc"]
    model = Model(d["id"], cells, d.get("parent_id"), mc, d.get("created_round", 0))
    return model, WeightSet(model.id, params)


def save_checkpoint(path, model: Model, weights: WeightSet) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, weights), indent=1) + "\n")


def load_checkpoint(path):
    """Return ``(model, weights)`` from a checkpoint written by :func:`save_checkpoint`."""
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    return model_from_dict(d)


# -- per-round outputs ------------------------------------------------------


def write_metrics(path, reports) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, col)) for col in METRICS_COLUMNS])


def read_metrics(path) -> list:
    """Parse a metrics CSV into a list of dicts; raises :class:`FormatError` on damage."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_COLUMNS:
        raise FormatError(f"{path}: line 1: expected header {','.join(METRICS_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_COLUMNS):
            raise FormatError(f"{path}: line {lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(row)}")
        try:
            rec = {
                "round": int(row[0]),
                "model_count": int(row[1]),
                "largest_macs": int(row[2]),
                "mean_loss": float(row[3]),
                "doc": float(row[4]) if row[4] else None,
                "cum_macs": int(row[5]),
                "round_time_s": float(row[6]),
                "comm_mb": float(row[7]),
            }
        except ValueError as e:
            raise FormatError(f"{path}: line {lineno}: {e}") from None
        out.append(rec)
    return out


def write_assignments(path, reports) -> None:
    """Per-round, per-model assignment histogram."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSIGNMENT_COLUMNS)
        for r in reports:
            for k in sorted(r.assigned):
                w.writerow([r.round, k, r.assigned[k], r.participants.get(k, 0)])


def write_utilities(path, reports) -> None:
    """Utility table snapshot after every round, in long format."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(UTILITY_COLUMNS)
        for r in reports:
            for cid in sorted(r.utilities):
                row = r.utilities[cid]
                for k in sorted(row):
                    w.writerow([r.round, cid, k, repr(float(row[k]))])


def write_events(path, events) -> None:
    """One JSON object per line."""
    with Path(path).open("w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def read_events(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line {lineno}: {e.msg}") from None
    return out


def summary_dict(result) -> dict:
    counts = {}
    for k in result.assignments.values():
        counts[k] = counts.get(k, 0) + 1
    return {
        "mean_acc": result.mean_acc,
        "iqr_acc": result.iqr_acc,
        "total_macs": result.total_macs,
        "rounds": len(result.reports),
        "models": [
            {"id": m.id, "parent_id": m.parent_id, "created_round": m.created_round, "macs": mac_count(m),
             "n_params": m.n_params, "clients_evaluated": counts.get(m.id, 0)}
            for m in (result.models[k] for k in sorted(result.models))
        ],
    }


def write_summary(path, result) -> None:
    Path(path).write_text(json.dumps(summary_dict(result), indent=1) + "\n")


def read_summary(path) -> dict:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    missing = [k for k in ("mean_acc", "iqr_acc", "total_macs", "models") if k not in d]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    return d


# -- resumable run state ----------------------------------------------------


def _float_or_none(v):
    return None if v is None else float(v)


def state_to_dict(state) -> dict:
    """Everything needed to continue a run except the data, which is regenerated from the config."""
    reports = []
    for r in state.reports:
        d = dict(vars(r))
        for key in ("model_losses", "participants", "assigned"):
            d[key] = {str(k): v for k, v in d[key].items()}
        d["utilities"] = {str(c): {str(k): u for k, u in row.items()} for c, row in d["utilities"].items()}
        reports.append(d)
    return {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        "config": state.config.to_dict(),
        "rounds_run": state.rounds_run,
        "cum_macs": state.cum_macs,
        "models": [model_to_dict(state.models[k], state.weights[k]) for k in sorted(state.models)],
        "utilities": {str(c): {str(k): u for k, u in row.items()} for c, row in state.utilities.U.items()},
        "doc_losses": list(state.doc.losses),
        "activeness": {cid: [float(v) for v in buf] for cid, buf in state.activeness.buffers.items()},
        "last_activeness": dict(state.last_activeness),
        "next_op": dict(state.transform.per_cell_next_op),
        "val_history": {str(k): v for k, v in state.val_history.items()},
        "reports": reports,
        "events": state.events,
    }


def state_from_dict(d: dict, config):
    """Rebuild a :class:`~morphfl.runtime.RunState` under ``config``.

    ``config`` may differ from the saved one only in ``max_rounds`` and
    ``threads``.
    """
    from .runtime import RoundReport, initial_state

    if d.get("format") != STATE_FORMAT or d.get("version") != STATE_VERSION:
        raise FormatError("not a run-state file of a supported version")
    saved = dict(d["config"])
    wanted = config.to_dict()
    for key in ("max_rounds", "threads"):
        saved.pop(key, None)
        wanted.pop(key, None)
    diff = sorted(k for k in wanted if saved.get(k) != wanted[k])
    if diff:
        raise ValueError(f"config differs from the saved run in {diff}")

    state = initial_state(config)
    state.models, state.weights = {}, {}
    for md in d["models"]:
        m, w = model_from_dict(md)
        state.models[m.id] = m
        state.weights[m.id] = w
    table = UtilityTable()
    table.U = {int(c): {int(k): u for k, u in row.items()} for c, row in d["utilities"].items()}
    state.utilities = table
    state.doc.losses = list(d["doc_losses"])
    state.activeness.buffers = {cid: deque(buf, maxlen=state.activeness.window)
                                for cid, buf in d["activeness"].items()}
    state.last_activeness = dict(d["last_activeness"])
    state.transform.per_cell_next_op = dict(d["next_op"])
    state.val_history = {int(k): v for k, v in d["val_history"].items()}
    state.rounds_run = d["rounds_run"]
    state.cum_macs = d["cum_macs"]
    state.events = list(d["events"])
    reports = []
    for rd in d["reports"]:
        rd = dict(rd)
        for key in ("model_losses", "participants", "assigned"):
            rd[key] = {int(k): v for k, v in rd[key].items()}
        rd["utilities"] = {int(c): {int(k): u for k, u in row.items()} for c, row in rd["utilities"].items()}
        rd["mean_loss"] = float(rd["mean_loss"])
        rd["doc"] = _float_or_none(rd["doc"])
        reports.append(RoundReport(**rd))
    state.reports = reports
    return state


def save_state(path, state) -> None:
    Path(path).write_text(json.dumps(state_to_dict(state)) + "\n")


def load_state(path, config):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    return state_from_dict(d, config)


def write_run(out_dir, result) -> None:
    """All outputs of a finished run into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", result.reports)
    write_assignments(out / "assignments.csv", result.reports)
    write_utilities(out / "utilities.csv", result.reports)
    write_events(out / "events.jsonl", result.events)
    write_summary(out / "summary.json", result)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for k in sorted(result.models):
        save_checkpoint(ckpt / f"model_{k}.json", result.models[k], result.weights[k])
    if result.state is not None:
        save_state(out / "state.json", result.state)
