"""
Growing a model without changing what it computes
=================================================

A model is a chain of dense cells. Widening duplicates units of one cell and
splits the outgoing weights between the copies; deepening inserts an identity
ReLU cell. Both change the architecture and the cost but not the function.
"""

import numpy as np

from morphfl.model import forward, init_weights, mac_count, make_model
from morphfl.transform import deepen_cell, widen_cell

rng = np.random.default_rng(0)

# A small two-hidden-layer network: 8 inputs, 4 and 3 hidden units, 3 classes.
parent = make_model([8, 4, 3, 3])
weights = init_weights(parent, rng)
x = rng.normal(size=(5, 8))
print("parent cells:", [(c.id, c.in_dim, c.out_dim) for c in parent.cells])
print("parent MACs :", mac_count(parent))

# Widen the first hidden cell by 2x. The symmetry noise adds a zero-sum
# perturbation to the split weights so the copies can drift apart in training.
wide, wide_w = widen_cell(parent, weights, parent.cells[0].id, factor=2, rng=rng, noise=0.1, child_id=1)
print("\nwidened cells:", [(c.id, c.in_dim, c.out_dim) for c in wide.cells])
print("widened MACs :", mac_count(wide))
print("max output change:", np.abs(forward(wide, wide_w, x) - forward(parent, weights, x)).max())

# Deepen after the (new) first cell: an identity matrix followed by ReLU is a
# no-op on the non-negative activations it receives.
deep, deep_w = deepen_cell(wide, wide_w, wide.cells[0].id, count=1, child_id=2)
print("\ndeepened cells:", [(c.id, c.origin[0]) for c in deep.cells])
print("max output change:", np.abs(forward(deep, deep_w, x) - forward(parent, weights, x)).max())

# Each cell remembers which parent cell it came from and how much of it
# survived; that bookkeeping drives the similarity used in aggregation.
print("\nmatching degrees:", deep.per_cell_mc)
