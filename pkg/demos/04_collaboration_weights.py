"""
Learning who to collaborate with
================================

Repeated weight updates push weight toward peers with small distances, while
the log-sum term keeps the total from collapsing.
"""

import numpy as np

from kdpdfl.collab import ConnectivityVector, RegularizerConfig, confidence, conn_vector_update, mixing_weights
from kdpdfl.distillation import DistanceVector

rng = np.random.default_rng(0)
M, owner = 6, 0
# peers 1-2 solve a similar task, 3-5 do not
typical = {1: 0.05, 2: 0.08, 3: 0.6, 4: 0.7, 5: 0.9}

for mu1, mu2 in [(0.0, 0.0), (1.0, 0.1), (10.0, 0.1)]:
    cfg = RegularizerConfig(mu1=mu1, mu2=mu2)
    w = ConnectivityVector.initial(owner, M)
    for _ in range(40):
        nbrs = rng.choice(range(1, M), size=3, replace=False)
        d = DistanceVector(owner, {int(j): typical[int(j)] * rng.uniform(0.8, 1.2) for j in nbrs})
        w = conn_vector_update(w, d, cfg)
    print(f"mu1={mu1:<4} mu2={mu2:<4} weights {np.round(w.weights, 3)}")

# only the ratio of mu1 to mu2 matters under the normalized step
a = conn_vector_update(ConnectivityVector.initial(0, 4), DistanceVector(0, {1: 0.1, 2: 0.5}), RegularizerConfig(1, 0.1))
b = conn_vector_update(ConnectivityVector.initial(0, 4), DistanceVector(0, {1: 0.1, 2: 0.5}), RegularizerConfig(10, 1))
print("scale invariant:", np.allclose(a.weights, b.weights))

# mixing: self keeps its confidence, peers share the rest by weight
conf = confidence(n_train=40, n_neighbors=2, c_base=200)
print("confidence:", conf)
print("mixing vector:", mixing_weights(w, [1, 3], conf))
