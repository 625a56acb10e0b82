"""
Assigning models to clients
===========================

Each client keeps a utility per model it can afford. Models are sampled with
softmax probabilities, and after training, the observed loss (standardized
across the round) moves the utility of the trained model and, scaled by
similarity, of its relatives.
"""

import math

import numpy as np

from morphfl.clients import (
    UtilityTable,
    model_probabilities,
    register_model,
    sample_model,
    standardize_losses,
    update_utilities,
)
from morphfl.model import make_model

# Softmax over utilities: ln 2 versus 0 gives 2:1 odds.
print("p(U=[ln2, 0]) =", model_probabilities([math.log(2), 0.0]))

rng = np.random.default_rng(0)
draws = [sample_model([0.0, 0.0, 0.0, 0.0], rng) for _ in range(20_000)]
print("empirical frequencies, 4 equal utilities:", np.bincount(draws) / len(draws))

# Three clients on one model; the round's losses are z-scored.
table = UtilityTable(clients=[0, 1, 2], initial_model_id=0)
z = standardize_losses({0: 0.9, 1: 1.4, 2: 1.1})
print("\nstandardized losses:", {k: round(v, 3) for k, v in z.items()})
for cid, score in z.items():
    update_utilities(table, cid, 0, score, sim=lambda a, b: 1.0)
print("utilities after one round:", table.snapshot())


# A new, larger model inherits each capable client's utility of its parent, so
# both start out equally likely.
class Client:
    def __init__(self, cid, capacity):
        self.id, self.capacity = cid, capacity


child = make_model([4, 8, 2], model_id=1)
register_model(table, child, parent_id=0, registry=[Client(0, 1e9), Client(1, 1e9), Client(2, 10)])
print("after registering model 1:", table.snapshot())
print("client 0 probabilities:", model_probabilities(list(table.row(0).values())))
