"""
Non-i.i.d. clients from a Dirichlet draw
========================================

Small alpha concentrates each client on a few classes.
"""

import numpy as np

from kdpdfl.data import PartitionSpec, dirichlet_partition, generate_synthetic

pool, cluster_of_class = generate_synthetic(seed=0)
print("pool:", len(pool), "samples,", pool.n_features, "features")
print("cluster of each class:", cluster_of_class)

for alpha in (100.0, 0.1):
    clients = dirichlet_partition(pool, PartitionSpec(M=6, dirichlet_alpha=alpha, seed=3))
    print(f"\nalpha = {alpha}")
    for c in clients:
        hist = c.train.label_histogram()
        top = hist.max() / hist.sum()
        print(f"  client {c.client_id}: train {len(c.train):3d}  val {len(c.validation):2d}  "
              f"test {len(c.test):3d}  labels {hist}  majority {top:.2f}")

# test sets follow each client's own label mix
c = clients[0]
print("\nclient 0 train share:", np.round(c.train.label_histogram() / len(c.train), 2))
print("client 0 test share: ", np.round(c.test.label_histogram() / len(c.test), 2))
