"""
Comparing models through their predictions
==========================================

Two clients trained on the same cluster produce similar softmax outputs on a
shared probe batch; a client from the other cluster does not.
"""

import numpy as np

from kdpdfl.data import Dataset, generate_synthetic
from kdpdfl.distillation import distance_vector, make_probe, wasserstein2d
from kdpdfl.nn import Architecture, init_model, train_step

print("hand case:", wasserstein2d(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])))

pool, cluster_of_class = generate_synthetic(seed=0)
rng = np.random.default_rng(0)


def client_on(cluster):
    classes = np.flatnonzero(cluster_of_class == cluster)
    idx = rng.choice(np.flatnonzero(np.isin(pool.labels, classes)), size=300, replace=False)
    return pool.subset(idx)


def fit(data: Dataset, seed):
    model = init_model(Architecture(20, [32], 9), seed)
    for _ in range(800):
        model, _ = train_step(model, data.subset(rng.choice(len(data), 32, replace=False)).as_batch(), 0.05)
    return model


data = {0: client_on(0), 1: client_on(0), 2: client_on(1)}
models = {k: fit(d, k) for k, d in data.items()}

# client 0 is the star: its own batch is the probe
probe = make_probe(data[0].as_batch(), 32, rng)
d = distance_vector(0, {1: models[1], 2: models[2]}, models[0], probe)
print("distances seen by client 0:", {k: round(v, 4) for k, v in d.entries.items()})
print("same-cluster peer is closer:", d.entries[1] < d.entries[2])
