import json

import numpy as np
from scipy.spatial import cKDTree
import pytest

from kdpdfl.data import (
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    generate_synthetic,
    load_csv,
    partition_manifest,
    write_manifest,
)


@pytest.fixture(scope="module")
def big_pool():
    ds, _ = generate_synthetic(9, 5, 3, 2500, seed=0)
    return ds


def test_synthetic_shape_and_balance():
    ds, clusters = generate_synthetic(n_classes=4, n_features=3, n_clusters=2, samples_per_class=100, seed=1)
    assert len(ds) == 400
    np.testing.assert_array_equal(ds.label_histogram(), [100] * 4)
    np.testing.assert_array_equal(clusters, [0, 1, 0, 1])


def test_synthetic_deterministic():
    a, _ = generate_synthetic(seed=3)
    b, _ = generate_synthetic(seed=3)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_default_is_separable(seed):
    # classes are multi-modal, so check leave-one-out 1-NN rather than centroids
    ds, _ = generate_synthetic(seed=seed)
    _, idx = cKDTree(ds.features).query(ds.features, k=2)
    assert np.mean(ds.labels[idx[:, 1]] == ds.labels) > 0.85


def test_synthetic_rejects_degenerate():
    with pytest.raises(ValueError):
        generate_synthetic(n_classes=3, n_clusters=4)
    with pytest.raises(ValueError):
        generate_synthetic(samples_per_class=0)


def test_partition_sizes_and_disjointness(big_pool):
    spec = PartitionSpec(M=20, seed=5)
    clients = dirichlet_partition(big_pool, spec)
    seen = []
    for c in clients:
        n_total = len(c.train) + len(c.validation)
        assert spec.min_train <= n_total <= spec.max_train
        assert len(c.validation) == round(0.2 * n_total)
        assert len(c.test) == spec.test_per_client
        for split in (c.train, c.validation, c.test):
            seen.extend(split.indices.tolist())
            np.testing.assert_array_equal(big_pool.labels[split.indices], split.labels)
    assert len(seen) == len(set(seen))


def test_partition_deterministic(big_pool):
    a = partition_manifest(dirichlet_partition(big_pool, PartitionSpec(M=5, seed=9)))
    b = partition_manifest(dirichlet_partition(big_pool, PartitionSpec(M=5, seed=9)))
    assert a == b


def test_test_split_follows_train_distribution(big_pool):
    for c in dirichlet_partition(big_pool, PartitionSpec(M=10, seed=2)):
        train_classes = set(np.flatnonzero(np.bincount(
            np.concatenate([c.train.labels, c.validation.labels]), minlength=9) > 0))
        test_hist = c.test.label_histogram() / len(c.test)
        # dominant test class is one of the train classes
        assert int(np.argmax(test_hist)) in train_classes


def test_huge_alpha_is_near_uniform(big_pool):
    spec = PartitionSpec(M=2, dirichlet_alpha=1e6, min_train=1000, max_train=1000,
                         test_per_client=100, validation_fraction=0.0, seed=0)
    for c in dirichlet_partition(big_pool, spec):
        props = c.train.label_histogram() / len(c.train)
        assert np.max(np.abs(props - 1 / 9)) < 0.05


def test_small_alpha_concentrates_labels(big_pool):
    # Monte-Carlo over 100 seeds, M=20, 9 classes
    active, zero_frac = [], []
    for seed in range(100):
        for c in dirichlet_partition(big_pool, PartitionSpec(M=20, dirichlet_alpha=0.1, seed=seed)):
            hist = np.bincount(np.concatenate([c.train.labels, c.validation.labels]), minlength=9)
            mass = hist / hist.sum()
            active.append(np.sum(mass >= 0.05))
            zero_frac.append(np.mean(hist == 0))
    assert np.median(active) <= 4
    assert np.mean(zero_frac) >= 0.5


def test_partition_insufficient_pool():
    ds, _ = generate_synthetic(3, 2, 1, 20, seed=0)
    with pytest.raises(ValueError, match="short by"):
        dirichlet_partition(ds, PartitionSpec(M=5, seed=0))


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(M=1)
    with pytest.raises(ValueError):
        PartitionSpec(M=3, dirichlet_alpha=0)
    with pytest.raises(ValueError):
        PartitionSpec(M=3, min_train=50, max_train=10)


def test_manifest_json(tmp_path, big_pool):
    clients = dirichlet_partition(big_pool, PartitionSpec(M=3, seed=0))
    path = tmp_path / "partition.json"
    write_manifest(clients, path)
    loaded = json.loads(path.read_text())
    assert set(loaded) == {"0", "1", "2"}
    assert loaded["1"]["test"] == clients[1].test.indices.tolist()


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_csv_toy(tmp_path):
    p = write(tmp_path, "a,b,label\n1,2,cat\n3,4,dog\n5,6,cat\n")
    ds, mapping = load_csv(p, "label", normalize=False)
    assert len(ds) == 3 and ds.n_features == 2
    assert mapping == {"cat": 0, "dog": 1}
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])


def test_load_csv_normalize(tmp_path):
    rng = np.random.default_rng(0)
    rows = "\n".join(f"{a},{b},7,{lab}" for a, b, lab in zip(rng.normal(3, 2, 50), rng.normal(-1, 5, 50), rng.integers(0, 3, 50)))
    ds, _ = load_csv(write(tmp_path, "x,y,const,y_label\n" + rows + "\n"), "y_label")
    np.testing.assert_allclose(ds.features[:, :2].mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(ds.features[:, :2].std(axis=0), 1, atol=1e-6)
    np.testing.assert_array_equal(ds.features[:, 2], 0.0)


def test_load_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", "label")
    with pytest.raises(ValueError, match="not in header"):
        load_csv(write(tmp_path, "a,b\n1,2\n"), "label")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(write(tmp_path, "a,label\n1,x\n2\n"), "label")
    with pytest.raises(ValueError, match=r":2: non-numeric"):
        load_csv(write(tmp_path, "a,label\nfoo,x\n"), "label")


def test_dataset_rejects_nan_and_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1)), np.array([3]), 2)
