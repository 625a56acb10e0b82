"""
A heterogeneous client population
=================================

Clients get Dirichlet-skewed label mixes and log-uniform compute capacities
spanning a 29x range. Smaller Dirichlet concentrations give more skewed
clients.
"""

import numpy as np

from morphfl.datagen import CapacityConfig, DataConfig, generate_dataset, label_tv_distance, partition_dirichlet, sample_capacities

cfg = DataConfig(num_clients=40, n_classes=5, feature_dim=32)
X, y = generate_dataset(cfg, 4000)
print("dataset:", X.shape, "class counts:", np.bincount(y))

for h in (0.1, 0.5, 2.0, 100.0):
    parts = partition_dirichlet((X, y), 40, h, np.random.default_rng(0), samples_per_client=(60, 140))
    tv = [label_tv_distance(y[np.concatenate(p)], 5) for p in parts]
    print(f"h={h:>5}: mean distance of client label mix from uniform = {np.mean(tv):.3f}")

caps = sample_capacities(CapacityConfig(cap_min=74.0, cap_max=74.0 * 29), 40, np.random.default_rng(0))
c = np.array([cap for cap, _ in caps])
print(f"\ncapacities: min {c.min():.0f}, median {np.median(c):.0f}, max {c.max():.0f} MACs "
      f"(ratio {c.max() / c.min():.1f})")
