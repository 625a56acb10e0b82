"""Client registry, utility-driven model assignment and joint utility updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import mac_count

UTILITY_CLIP = 50.0


@dataclass
class ClientRecord:
    id: int
    capacity: float
    speed: float
    train: tuple
    test: tuple = field(default=None)

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("client speed must be positive")

    @property
    def n_train(self) -> int:
        return len(self.train[1])


class UtilityTable:
    """``U[client][model]``; only compatible (client, model) pairs have entries."""

    def __init__(self, clients=(), initial_model_id: int = 0):
        self.U = {c.id if isinstance(c, ClientRecord) else c: {initial_model_id: 0.0} for c in clients}

    def row(self, client_id) -> dict:
        return self.U[client_id]

    def get(self, client_id, model_id):
        return self.U[client_id].get(model_id)

    def column(self, model_id) -> dict:
        return {c: row[model_id] for c, row in self.U.items() if model_id in row}

    def snapshot(self) -> dict:
        return {c: dict(row) for c, row in self.U.items()}


def select_clients(registry, n: int, rng) -> list:
    """``n`` distinct client ids drawn uniformly without replacement."""
    ids = [c.id if isinstance(c, ClientRecord) else c for c in registry]
    if n > len(ids):
        raise ValueError(f"cannot select {n} of {len(ids)} clients")
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    return [ids[i] for i in rng.choice(len(ids), size=n, replace=False)]


def compatible_models(client: ClientRecord, models) -> list:
    """Ids of models the client can run (MACs <= capacity), in creation order."""
    return [m.id for m in sorted(models, key=lambda m: m.id) if mac_count(m) <= client.capacity]


def model_probabilities(utilities) -> np.ndarray:
    """Softmax over utilities, clipped to +-50 and max-shifted."""
    u = np.clip(np.asarray(utilities, dtype=np.float64), -UTILITY_CLIP, UTILITY_CLIP)
    if u.size == 0:
        raise ValueError("no compatible models")
    e = np.exp(u - u.max())
    return e / e.sum()


def sample_model(utilities, rng) -> int:
    """Index drawn with probability proportional to ``exp(utility)``."""
    p = model_probabilities(utilities)
    if len(p) == 1:
        return 0
    k = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(k, len(p) - 1)


def standardize_losses(round_losses: dict) -> dict:
    """Z-score across this round's participants (population std)."""
    if not round_losses:
        return {}
    vals = np.array(list(round_losses.values()), dtype=np.float64)
    std = vals.std()
    if std < 1e-12:
        return {c: 0.0 for c in round_losses}
    mean = vals.mean()
    return {c: float((v - mean) / std) for c, v in round_losses.items()}


def update_utilities(table: UtilityTable, client_id, assigned_model_id, std_loss: float, sim) -> UtilityTable:
    """``U_k -= L * sim(M_k, M*)`` for every model the client can run.

    ``sim`` is a callable ``(model_id, assigned_model_id) -> float``.
    """
    row = table.U[client_id]
    for k in row:
        s = sim(k, assigned_model_id)
        if s != 0.0:
            row[k] = row[k] - std_loss * s
    return table


def register_model(table: UtilityTable, child, parent_id, registry) -> UtilityTable:
    """Give the child a copy of the parent's utility for every capable client."""
    macs = mac_count(child)
    for c in registry:
        row = table.U[c.id]
        if parent_id in row and macs <= c.capacity:
            row[child.id] = row[parent_id]
    return table
