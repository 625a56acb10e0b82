"""Dense cell-structured networks: forward/backward, SGD and MAC accounting.

Everything here is a pure function of its arguments. Parameters live in a
:class:`WeightSet` keyed by cell id; a :class:`Model` only describes topology
and lineage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

ACTIVATIONS = ("relu", "none")


class DimensionError(ValueError):
    """Raised when tensors or cells have incompatible shapes."""


class NumericError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class Cell:
    """One dense layer of a model.

    ``origin`` is ``("initial", None)``, ``("widened_from", parent_cell_id)``,
    ``("inherited", parent_cell_id)`` or ``("inserted_identity", None)``.

    ``out_map``/``in_map`` index this cell's output/input units into the
    parent cell's units; ``None`` means the identity map. They let weights be
    carried between a model and its ancestors.
    """

    id: str
    in_dim: int
    out_dim: int
    activation: str = "relu"
    origin: tuple = ("initial", None)
    out_map: Optional[tuple] = None
    in_map: Optional[tuple] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError(f"cell {self.id} has non-positive dims")

    @property
    def source(self) -> Optional[str]:
        """Id of the parent-model cell this one descends from."""
        return self.origin[1]

    @property
    def n_params(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim


@dataclass
class Model:
    id: int
    cells: list
    parent_id: Optional[int] = None
    per_cell_mc: dict = field(default_factory=dict)
    created_round: int = 0

    def __post_init__(self):
        if not self.cells:
            raise DimensionError("a model needs at least one cell")
        for a, b in zip(self.cells, self.cells[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"cell {a.id} out_dim {a.out_dim} != cell {b.id} in_dim {b.in_dim}"
                )
        if self.cells[-1].activation != "none":
            raise ValueError("the final cell must be linear")

    @property
    def in_dim(self) -> int:
        return self.cells[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.cells[-1].out_dim

    @property
    def n_params(self) -> int:
        return sum(c.n_params for c in self.cells)

    def cell(self, cell_id: str) -> Cell:
        for c in self.cells:
            if c.id == cell_id:
                return c
        raise KeyError(cell_id)

    def index(self, cell_id: str) -> int:
        for i, c in enumerate(self.cells):
            if c.id == cell_id:
                return i
        raise KeyError(cell_id)


@dataclass
class WeightSet:
    """Per-cell ``(weight, bias)`` arrays; weight is ``out_dim x in_dim``."""

    model_id: int
    params: dict

    def copy(self) -> "WeightSet":
        return WeightSet(self.model_id, {k: (w.copy(), b.copy()) for k, (w, b) in self.params.items()})

    def flat(self) -> FloatArray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.params.values()])

    def __getitem__(self, cell_id):
        return self.params[cell_id]


def make_model(
    dims,
    model_id: int = 0,
    created_round: int = 0,
) -> Model:
    """Build a fresh ReLU MLP from ``dims = [in, hidden..., classes]``."""
    if len(dims) < 2:
        raise DimensionError("dims needs an input and an output size")
    cells = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = "none" if i == len(dims) - 2 else "relu"
        cells.append(Cell(f"m{model_id}c{i}", int(a), int(b), act))
    return Model(model_id, cells, created_round=created_round,
                 per_cell_mc={c.id: 1.0 for c in cells})


def init_weights(model: Model, rng: np.random.Generator) -> WeightSet:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    params = {}
    for c in model.cells:
        limit = np.sqrt(6.0 / c.in_dim)
        params[c.id] = (rng.uniform(-limit, limit, size=(c.out_dim, c.in_dim)), np.zeros(c.out_dim))
    return WeightSet(model.id, params)


def check_weights(model: Model, weights: WeightSet) -> None:
    if set(weights.params) != {c.id for c in model.cells}:
        raise DimensionError(f"weights do not cover exactly the cells of model {model.id}")
    for c in model.cells:
        w, b = weights.params[c.id]
        if w.shape != (c.out_dim, c.in_dim) or b.shape != (c.out_dim,):
            raise DimensionError(f"cell {c.id}: weight {w.shape}/bias {b.shape} vs {c.out_dim}x{c.in_dim}")


def _as_features(model: Model, x) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise DimensionError(f"expected features of width {model.in_dim}, got shape {x.shape}")
    return x


def _forward_trace(model, weights, x):
    acts = [x]
    pre = []
    h = x
    for c in model.cells:
        w, b = weights.params[c.id]
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if c.activation == "relu" else z
        acts.append(h)
    return pre, acts


def forward(model: Model, weights: WeightSet, x) -> FloatArray:
    """Logits of shape ``(batch, n_classes)``."""
    x = _as_features(model, x)
    h = x
    for c in model.cells:
        w, b = weights.params[c.id]
        h = h @ w.T + b
        if c.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def cross_entropy(logits: FloatArray, labels) -> float:
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(labels)), labels]))


def loss_and_grads(model: Model, weights: WeightSet, x, labels):
    """Mean softmax cross-entropy and its exact gradient w.r.t. every parameter."""
    x = _as_features(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise DimensionError("one label per sample required")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise DimensionError("label out of range")
    pre, acts = _forward_trace(model, weights, x)
    logits = acts[-1]
    n = x.shape[0]
    # non-finite values are reported below as NumericError
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        loss = float(np.mean(np.log(e.sum(axis=1)) - shifted[np.arange(n), labels]))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads = {}
    for i in range(len(model.cells) - 1, -1, -1):
        c = model.cells[i]
        if c.activation == "relu":
            delta = delta * (pre[i] > 0)
        w, _ = weights.params[c.id]
        grads[c.id] = (delta.T @ acts[i], delta.sum(axis=0))
        delta = delta @ w
    grads = {c.id: grads[c.id] for c in model.cells}
    return loss, WeightSet(model.id, grads)


def sgd_step(weights: WeightSet, grads: WeightSet, lr: float) -> WeightSet:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if set(weights.params) != set(grads.params):
        raise DimensionError("gradient cells do not match weights")
    out = {}
    for k, (w, b) in weights.params.items():
        gw, gb = grads.params[k]
        if gw.shape != w.shape or gb.shape != b.shape:
            raise DimensionError(f"gradient shape mismatch on cell {k}")
        out[k] = (w - lr * gw, b - lr * gb)
    return WeightSet(weights.model_id, out)


def local_train(model, weights, client_data, steps, batch_size, lr, rng):
    """Run ``steps`` SGD steps on mini-batches drawn with replacement.

    A ``batch_size`` at least as large as the client's data means full-batch
    steps (no sampling, rng untouched).

    Returns the new weights, the mean per-step gradient and the mean per-step
    loss.
    """
    x, y = client_data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("client has no training data")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    w = weights
    grad_sum = None
    loss_sum = 0.0
    for _ in range(steps):
        if batch_size >= len(y):
            loss, g = loss_and_grads(model, w, x, y)
        else:
            idx = rng.integers(0, len(y), size=batch_size)
            loss, g = loss_and_grads(model, w, x[idx], y[idx])
        loss_sum += loss
        if grad_sum is None:
            grad_sum = {k: (gw.copy(), gb.copy()) for k, (gw, gb) in g.params.items()}
        else:
            for k, (gw, gb) in g.params.items():
                grad_sum[k][0].__iadd__(gw)
                grad_sum[k][1].__iadd__(gb)
        w = sgd_step(w, g, lr)
    avg_grad = WeightSet(model.id, {k: (gw / steps, gb / steps) for k, (gw, gb) in grad_sum.items()})
    return w, avg_grad, loss_sum / steps


def accuracy(model, weights, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(forward(model, weights, x), axis=1) == y))


def mac_count(model: Model) -> int:
    """Forward multiply-accumulates per sample; activations are free."""
    return int(sum(c.in_dim * c.out_dim for c in model.cells))
