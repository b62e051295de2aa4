from __future__ import annotations

import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decaf.data import (
    CapacityError,
    CompositionSpec,
    Dataset,
    IDXFormatError,
    generate_synthetic,
    load_idx,
    partition,
    proportions_to_counts,
    reserve_auxiliary,
    write_idx,
)

TABLE_USER_2 = [6.67, 10, 8.33, 7.5, 13.33, 15.83, 5.83, 10, 12.5, 10]


def test_synthetic_counts_and_labels():
    ds = generate_synthetic(classes=2, dim=3, per_class=5, seed=0)
    assert len(ds) == 10
    assert ds.class_counts().tolist() == [5, 5]


def test_zero_spread_gives_class_means():
    ds = generate_synthetic(classes=4, dim=3, per_class=6, spread=0.0, seed=1)
    assert np.all(ds.features == 0)
    ds = generate_synthetic(classes=3, dim=3, per_class=2, spread=0.0, seed=1)
    assert np.all(ds.features == 0)


def test_synthetic_class_means_along_axes():
    ds = generate_synthetic(classes=12, dim=5, per_class=4000, spread=4.0, seed=2)
    for c in range(12):
        mean = ds.features[ds.labels == c].mean(axis=0)
        expect = np.zeros(5)
        expect[c % 5] = 4.0
        np.testing.assert_allclose(mean, expect, atol=0.1)


def centroid_accuracy_oracle(spread: float, classes: int) -> float:
    """P(correct) for nearest-true-mean on orthogonal unit-variance blobs.

    Sample ``x = s e_c + z`` beats class ``k`` iff ``z_k - z_c < s``, so the
    probability is ``E[Phi(s + z_c)^(N-1)]`` over standard normal ``z_c``.
    """
    z = np.linspace(-10, 10, 20001)
    phi = np.exp(-z ** 2 / 2) / math.sqrt(2 * math.pi)
    cdf = 0.5 * (1 + np.vectorize(math.erf)((spread + z) / math.sqrt(2)))
    return float(np.sum(phi * cdf ** (classes - 1)) * (z[1] - z[0]))


def test_nearest_centroid_matches_analytic_oracle():
    expected = centroid_accuracy_oracle(4.0, 10)
    assert expected == pytest.approx(0.9830, abs=5e-4)
    n = 2000
    ds = generate_synthetic(classes=10, dim=10, per_class=n // 10, spread=4.0, seed=3)
    centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
    d = ((ds.features[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    acc = float(np.mean(d.argmin(axis=1) == ds.labels))
    se = math.sqrt(expected * (1 - expected) / n)
    print(f"nearest-centroid accuracy {acc:.4f}, analytic {expected:.4f} (a 0.99 floor is above the analytic value)")
    assert abs(acc - expected) <= 4 * se
    assert acc >= 0.97


def test_synthetic_is_seed_deterministic():
    a = generate_synthetic(seed=11)
    b = generate_synthetic(seed=11)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, generate_synthetic(seed=12).features)


def test_table_proportions_round_within_one():
    counts = proportions_to_counts(TABLE_USER_2, 1200)
    assert counts.sum() == 1200
    target = np.array(TABLE_USER_2) / sum(TABLE_USER_2) * 1200
    assert np.all(np.abs(counts - target) <= 1)
    assert counts.tolist() == [80, 120, 100, 90, 160, 190, 70, 120, 150, 120]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-6),
       st.integers(1, 5000))
def test_largest_remainder_property(props, total):
    counts = proportions_to_counts(props, total)
    target = np.array(props) / sum(props) * total
    assert counts.sum() == total
    assert np.all(np.abs(counts - target) < 1 + 1e-9)
    assert np.all(counts[np.array(props) == 0] == 0)


def test_single_user_takes_everything():
    ds = generate_synthetic(classes=3, dim=2, per_class=7, seed=0)
    (user,) = partition(ds, [CompositionSpec(tuple(ds.class_counts()))], seed=0)
    np.testing.assert_array_equal(np.sort(user.ids), ds.ids)
    np.testing.assert_array_equal(user.features, ds.features)


def test_null_class_is_absent():
    ds = generate_synthetic(classes=5, dim=3, per_class=40, seed=0)
    users = partition(ds, [CompositionSpec((3, 3, 3, 0, 3)), CompositionSpec((1, 0, 0, 9, 2))], seed=4)
    assert 3 not in users[0].labels
    assert users[0].class_counts().tolist() == [3, 3, 3, 0, 3]
    assert users[1].class_counts().tolist() == [1, 0, 0, 9, 2]


def test_capacity_error_names_class():
    ds = generate_synthetic(classes=3, dim=2, per_class=5, seed=0)
    with pytest.raises(CapacityError, match="class 1"):
        partition(ds, [CompositionSpec((1, 6, 1))], seed=0)


def test_auxiliary_sizes_and_disjointness():
    ds = generate_synthetic(classes=10, dim=4, per_class=30, seed=0)
    aux, rest = reserve_auxiliary(ds, 2, seed=1)
    assert sum(len(p) for p in aux.per_class) == 20
    assert len(rest) == len(ds) - 20
    aux_ids = {int(i) for ids in aux.ids for i in ids}
    for i in rest.ids:
        assert int(i) not in aux_ids
    for c in range(10):
        assert np.all(ds.labels[aux.ids[c]] == c)
        np.testing.assert_array_equal(ds.features[aux.ids[c]], aux.per_class[c])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_partition_conservation(seed, n_users):
    rng = np.random.default_rng(seed)
    ds = generate_synthetic(classes=4, dim=2, per_class=50, seed=seed)
    aux, rest = reserve_auxiliary(ds, 3, seed=seed)
    specs = []
    for _ in range(n_users):
        counts = rng.integers(0, 10, 4)
        counts[0] += counts.sum() == 0
        specs.append(CompositionSpec(tuple(int(v) for v in counts)))
    users = partition(rest, specs, seed=seed)
    used = sum(u.class_counts() for u in users)
    aux_counts = np.array([len(p) for p in aux.per_class])
    unassigned = rest.class_counts() - used
    assert np.all(unassigned >= 0)
    np.testing.assert_array_equal(used + aux_counts + unassigned, ds.class_counts())
    ids = np.concatenate([u.ids for u in users])
    assert len(set(ids.tolist())) == len(ids)
    for u, s in zip(users, specs):
        assert u.class_counts().tolist() == list(s.counts)


def test_partition_seed_determinism():
    ds = generate_synthetic(classes=3, dim=2, per_class=40, seed=0)
    specs = [CompositionSpec((5, 5, 5)), CompositionSpec((2, 0, 9))]
    a = partition(ds, specs, seed=8)
    b = partition(ds, specs, seed=8)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.ids, y.ids)


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = rng.integers(0, 10, size=10, dtype=np.uint8)
    write_idx(images, labels, tmp_path / "img", tmp_path / "lbl")
    ds = load_idx(tmp_path / "img", tmp_path / "lbl", 10)
    assert len(ds) == 10 and ds.dim == 784
    assert ds.features[0, 0] == 1.0
    np.testing.assert_allclose(ds.features, images.reshape(10, -1) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_gzip(tmp_path):
    images = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3)
    write_idx(images, np.array([0, 1]), tmp_path / "i", tmp_path / "l")
    for name in ("i", "l"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    ds = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    assert ds.dim == 6 and ds.class_count == 2


def test_idx_bad_magic_and_truncation(tmp_path):
    write_idx(np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8), tmp_path / "i", tmp_path / "l")
    with pytest.raises(IDXFormatError, match="magic"):
        load_idx(tmp_path / "l", tmp_path / "i")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(IDXFormatError, match="truncated"):
        load_idx(tmp_path / "short", tmp_path / "l")
    (tmp_path / "l4").write_bytes(struct.pack(">II", 0x801, 4) + bytes(4))
    with pytest.raises(IDXFormatError, match="does not match"):
        load_idx(tmp_path / "i", tmp_path / "l4")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(ValueError):
        CompositionSpec((0, 0))
    assert CompositionSpec((0, 2, 2)).null_classes == frozenset({0})
