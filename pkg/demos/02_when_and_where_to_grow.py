"""
Deciding when and where to grow
===============================

Growth is triggered when the largest model's loss curve flattens, measured by
the degree of convergence: the mean per-round loss drop over a lagged window.
The cells to grow are the ones whose gradients are largest relative to their
weights.
"""

import numpy as np

from morphfl.model import init_weights, make_model
from morphfl.transform import (
    ActivenessTracker,
    DocTracker,
    TransformConfig,
    cell_activeness,
    compute_doc,
    select_cells,
    should_transform,
    transform_model,
)

# A loss curve that decays and then flattens out.
rounds = np.arange(60)
losses = 0.4 + 1.2 * np.exp(-rounds / 8)
tracker = DocTracker(gamma=10, delta=5, beta=0.003)
fired = None
model = make_model([16, 2, 4])
for t, loss in enumerate(losses):
    tracker.record(float(loss))
    doc = compute_doc(tracker)
    if fired is None and should_transform(doc, tracker.beta, model, max_capacity=1e6):
        fired = t
print(f"degree of convergence falls below beta at round {fired}")

# Activeness compares gradient and weight norms per cell, averaged over the
# last few rounds. Here the first cell gets large gradients.
rng = np.random.default_rng(1)
w = init_weights(model, rng)
act = ActivenessTracker(window=5)
for _ in range(5):
    grads = w.copy()
    for k, (gw, gb) in grads.params.items():
        gw *= 0.5 if k.endswith("c0") else 0.05
    scores = cell_activeness(act, grads, w)
print("activeness:", {k: round(v, 3) for k, v in scores.items()})
print("selected:", select_cells(scores, alpha=0.9, model=model))

# The first time a cell is picked it is widened, the next time deepened.
cfg = TransformConfig()
child, child_w, ops = transform_model(model, w, scores, cfg, rng, child_id=1)
print("first transformation:", ops)
scores = {c.id: (1.0 if i == 0 else 0.1) for i, c in enumerate(child.cells)}
grandchild, _, ops = transform_model(child, child_w, scores, cfg, rng, child_id=2)
print("second transformation:", ops)
