import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdpdfl.nn import (
    Architecture,
    Batch,
    NumericalError,
    ParamVector,
    combine,
    forward,
    init_model,
    loss_and_grad,
    sgd_step,
    softmax,
    train_step,
    _unpack,
)


def fd_grad(model, batch, h=1e-5):
    """Central finite differences of the train-mode loss."""
    g = np.zeros_like(model.values)
    for k in range(model.values.size):
        plus, minus = model.copy(), model.copy()
        plus.values[k] += h
        minus.values[k] -= h
        g[k] = (forward(plus, batch, True)[1] - forward(minus, batch, True)[1]) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def random_case(seed, batchnorm=True):
    rng = np.random.default_rng(seed)
    d_in = int(rng.integers(2, 6))
    hidden = [int(rng.integers(2, 8)) for _ in range(int(rng.integers(1, 3)))]
    n_out = int(rng.integers(2, 5))
    arch = Architecture(d_in, hidden, n_out, batchnorm)
    model = init_model(arch, seed)
    # perturb batchnorm scale/shift away from the identity init
    model.values += rng.normal(scale=0.1, size=model.values.size)
    n = int(rng.integers(3, 9))
    batch = Batch(rng.normal(size=(n, d_in)), rng.integers(0, n_out, size=n))
    return model, batch


def test_tabular_architecture_param_count():
    arch = Architecture(296, [128], 9, use_batchnorm=True)
    assert arch.param_count == 39_769
    assert init_model(arch, 0).param_count == 39_769
    # 306 h + 601 for one hidden layer of width h
    assert Architecture(296, [7], 9).param_count == 306 * 7 + 601


def test_init_deterministic_and_seed_sensitive():
    arch = Architecture(2, [4], 2, use_batchnorm=False)
    np.testing.assert_array_equal(init_model(arch, 7).values, init_model(arch, 7).values)
    assert not np.array_equal(init_model(arch, 7).values, init_model(arch, 8).values)


def test_init_batchnorm_identity():
    arch = Architecture(3, [4], 2)
    layers = _unpack(arch, init_model(arch, 1).values)
    np.testing.assert_array_equal(layers.gamma, 1.0)
    np.testing.assert_array_equal(layers.beta, 0.0)


@pytest.mark.parametrize("dims", [(0, [3], 2), (3, [0], 2), (3, [3], 1)])
def test_invalid_architecture(dims):
    with pytest.raises(ValueError):
        Architecture(*dims)


def test_zero_final_layer_gives_log_nclasses():
    arch = Architecture(3, [5], 4, use_batchnorm=False)
    model = init_model(arch, 0)
    layers = _unpack(arch, model.values)
    layers.weights[-1][:] = 0
    layers.biases[-1][:] = 0
    logits, loss = forward(model, Batch(np.ones((1, 3)), [2]))
    np.testing.assert_allclose(logits, 0.0)
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_forward_matches_hand_computation():
    # 2 inputs -> 2 hidden (ReLU) -> 2 outputs, no batchnorm
    arch = Architecture(2, [2], 2, use_batchnorm=False)
    w1 = [[1.0, -1.0], [0.5, 2.0]]
    b1 = [0.0, -1.0]
    w2 = [[1.0, 0.0], [-1.0, 1.0]]
    b2 = [0.1, -0.1]
    model = ParamVector(arch, np.array([*np.ravel(w1), *b1, *np.ravel(w2), *b2]))
    x = np.array([[1.0, 2.0]])
    # hidden pre: [1*1 + 2*0.5 + 0, 1*(-1) + 2*2 - 1] = [2, 2] -> relu [2, 2]
    # logits: [2*1 + 2*(-1) + 0.1, 2*0 + 2*1 - 0.1] = [0.1, 1.9]
    logits, loss = forward(model, Batch(x, [1]))
    np.testing.assert_allclose(logits, [[0.1, 1.9]], atol=1e-12)
    expected = -1.9 + math.log(math.exp(0.1) + math.exp(1.9))
    assert loss == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("batchnorm", [True, False])
def test_grad_matches_finite_differences(seed, batchnorm):
    model, batch = random_case(seed, batchnorm)
    assert model.param_count <= 200
    _, g = loss_and_grad(model, batch)
    assert g.shape == model.values.shape
    assert rel_err(g, fd_grad(model, batch)) <= 1e-4


def test_grad_invariant_to_batch_duplication():
    model, batch = random_case(3)
    dup = Batch(np.vstack([batch.features] * 2), np.concatenate([batch.labels] * 2))
    l1, g1 = loss_and_grad(model, batch)
    l2, g2 = loss_and_grad(model, dup)
    assert l1 == pytest.approx(l2, abs=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_final_bias_grad_sums_to_zero():
    arch = Architecture(2, [3], 3, use_batchnorm=False)
    model = init_model(arch, 0)
    _, g = loss_and_grad(model, Batch([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [0, 1, 2]))
    assert _unpack(arch, g).biases[-1].sum() == pytest.approx(0.0, abs=1e-12)


def test_loss_nonnegative_and_stable_for_huge_logits():
    arch = Architecture(2, [2], 2, use_batchnorm=False)
    model = init_model(arch, 0)
    model.values *= 1e3
    _, loss = forward(model, Batch([[50.0, -50.0]], [0]))
    assert loss >= 0 and np.isfinite(loss)


def test_non_finite_raises():
    arch = Architecture(2, [2], 2, use_batchnorm=False)
    model = init_model(arch, 0)
    model.values[:] = np.inf
    with pytest.raises(NumericalError):
        forward(model, Batch([[1.0, 1.0]], [0]))


def test_dimension_mismatch():
    model = init_model(Architecture(3, [2], 2), 0)
    with pytest.raises(ValueError):
        forward(model, Batch(np.ones((2, 4)), [0, 1]))


def test_sgd_step_arithmetic():
    arch = Architecture(1, [], 2, use_batchnorm=False)  # 1*2 + 2 = 4 params
    model = ParamVector(arch, np.array([1.0, 2.0, 0.0, 0.0]))
    out = sgd_step(model, np.array([0.5, -1.0, 0.0, 0.0]), 0.1)
    np.testing.assert_allclose(out.values[:2], [0.95, 2.1])
    np.testing.assert_array_equal(sgd_step(model, np.ones(4), 0.0).values, model.values)
    np.testing.assert_array_equal(sgd_step(model, np.zeros(4), 0.3).values, model.values)
    with pytest.raises(ValueError):
        sgd_step(model, np.ones(3), 0.1)


def test_combine_examples():
    arch = Architecture(1, [], 2, use_batchnorm=False)
    a = ParamVector(arch, np.array([1.0, 1.0, 1.0, 1.0]))
    b = ParamVector(arch, np.array([3.0, 5.0, 3.0, 5.0]))
    np.testing.assert_array_equal(combine([(1.0, a)]).values, a.values)
    np.testing.assert_allclose(combine([(0.3, a), (0.7, a)]).values, a.values, atol=1e-15)
    np.testing.assert_allclose(combine([(0.5, a), (0.5, b)]).values, [2, 3, 2, 3])
    other = init_model(Architecture(2, [], 2, use_batchnorm=False), 0)
    with pytest.raises(ValueError):
        combine([(0.5, a), (0.5, other)])
    with pytest.raises(ValueError):
        combine([])


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(0, 5), min_size=2, max_size=2),
    st.lists(st.floats(0, 5), min_size=2, max_size=2),
    st.floats(0, 3),
    st.floats(0, 3),
)
def test_combine_is_linear(w1, w2, a, b):
    arch = Architecture(2, [3], 2)
    models = [init_model(arch, s) for s in (1, 2)]
    lhs = combine([(a * x + b * y, m) for x, y, m in zip(w1, w2, models)]).values
    rhs = a * combine(list(zip(w1, models))).values + b * combine(list(zip(w2, models))).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_eval_forward_row_independent():
    model, batch = random_case(4)
    logits, _ = forward(model, batch, train_mode=False)
    perm = np.random.default_rng(0).permutation(len(batch))
    logits_p, _ = forward(model, Batch(batch.features[perm], batch.labels[perm]), train_mode=False)
    np.testing.assert_allclose(logits_p, logits[perm], atol=1e-14)


def test_train_step_deterministic_and_updates_running_stats():
    model, batch = random_case(5)
    m1, _ = train_step(model, batch, 0.1)
    m2, _ = train_step(model, batch, 0.1)
    np.testing.assert_array_equal(m1.values, m2.values)
    assert not np.array_equal(m1.running_mean, model.running_mean)
    np.testing.assert_allclose(m1.running_mean, 0.1 * batch.features.mean(axis=0))


def test_softmax_rows():
    p = softmax(np.array([[1000.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[1], [0.5, 0.5])
