"""
Sharing weights across a family of models
=========================================

Models of different sizes descend from each other. Lineage similarity scores
how much of an ancestor survives in a descendant, and soft aggregation blends
each model with its smaller relatives, weighted by that similarity and a decay
that fades with the round index. Larger models never feed smaller ones.
"""

import numpy as np

from morphfl.aggregate import AggregationConfig, crop_weights, expand_weights, soft_aggregate
from morphfl.model import init_weights, make_model
from morphfl.transform import deepen_cell, model_similarity, widen_cell

rng = np.random.default_rng(0)
m0 = make_model([6, 3, 3, 2])
w0 = init_weights(m0, rng)
m1, w1 = widen_cell(m0, w0, m0.cells[0].id, 2, rng, child_id=1, noise=0.1)
m2, w2 = deepen_cell(m1, w1, m1.cells[1].id, 1, child_id=2)
family = {0: m0, 1: m1, 2: m2}
for a, b in [(0, 1), (1, 2), (0, 2)]:
    print(f"sim(model {a}, model {b}) = {model_similarity(a, b, family):.3f}")

# Cropping a freshly widened child back to the parent's shape recovers the
# parent exactly: extra units are dropped and split columns summed back.
back = crop_weights(w1, m1, m0, family)
print("\ncrop(widen(W)) == W:", all(np.array_equal(back[k][0], w0[k][0]) for k in w0.params))

# Expansion goes the other way, into the descendant's coordinates.
up = expand_weights(w0, m0, m2, family)
print("cells reachable from model 0 in model 2:", sorted(up))

# Perturb the models independently, as local training would, then blend.
weights = {}
for k, w in ((0, w0), (1, w1), (2, w2)):
    weights[k] = w.copy()
    for gw, gb in weights[k].params.values():
        gw += rng.normal(size=gw.shape) * 0.1
cfg = AggregationConfig(eta=0.98)
for t in (0, 50, 500):
    out = soft_aggregate([m0, m1, m2], weights, t, cfg, family)
    shift = np.linalg.norm(out[2].flat() - weights[2].flat())
    print(f"round {t:>3}: model 2 moved by {shift:.4f}; model 0 unchanged: "
          f"{np.array_equal(out[0].flat(), weights[0].flat())}")
