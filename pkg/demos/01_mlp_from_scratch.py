"""
Training the numpy MLP
======================

Build the small classifier, check its gradient against finite differences,
then fit it on synthetic blobs.
"""

import numpy as np

from kdpdfl.data import generate_synthetic
from kdpdfl.nn import Architecture, Batch, forward, init_model, loss_and_grad, train_step

# batchnorm on the inputs, one hidden ReLU layer
arch = Architecture(input_dim=20, hidden_dims=[32], output_dim=9)
print("parameters:", arch.param_count)

# the published tabular model: 296 inputs, 128 hidden, 9 classes
print("296-128-9 parameters:", Architecture(296, [128], 9).param_count)

model = init_model(arch, seed=0)
rng = np.random.default_rng(0)
batch = Batch(rng.normal(size=(8, 20)), rng.integers(0, 9, size=8))

# central differences on a handful of coordinates
_, grad = loss_and_grad(model, batch)
for k in rng.choice(arch.param_count, size=5, replace=False):
    plus, minus = model.copy(), model.copy()
    plus.values[k] += 1e-5
    minus.values[k] -= 1e-5
    fd = (forward(plus, batch, True)[1] - forward(minus, batch, True)[1]) / 2e-5
    print(f"coord {k:4d}: analytic {grad[k]: .6f}  numeric {fd: .6f}")

# plain minibatch SGD on the pooled synthetic data
pool, _ = generate_synthetic(seed=1)
for step in range(1500):
    idx = rng.choice(len(pool), size=32, replace=False)
    model, loss = train_step(model, pool.subset(idx).as_batch(), lr=0.05)
    if step % 500 == 0:
        print(f"step {step:4d}  minibatch loss {loss:.3f}")

logits, loss = forward(model, pool.as_batch())
print(f"pooled accuracy {np.mean(logits.argmax(1) == pool.labels):.3f}, loss {loss:.3f}")
