import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsd.detection import (
    UNKNOWN,
    DegenerateClustering,
    ClusterResult,
    append_detection_report,
    assign_pseudo_labels,
    candidate_counts,
    farthest_quantile_flags,
    inconsistency_precision,
    kmeans,
    select_unknown_count,
    silhouette,
    unknown_prototypes,
)
from dsd.memory import InstanceMemory, PrototypeBank
from dsd.numerics import make_rng

from conftest import blobs, two_partition_optimum, unit

S = 1 / np.sqrt(2)


def test_matching_prototypes_give_class():
    bank = PrototypeBank(np.eye(4)[:3], np.eye(3))
    mem = InstanceMemory(np.eye(4)[[2]], np.eye(3)[[2]])
    (rec,) = assign_pseudo_labels(mem, bank)
    assert (rec.label_r, rec.label_f, rec.label) == (2, 2, 2)


def test_disagreement_is_unknown():
    bank = PrototypeBank(np.eye(4), np.eye(4))
    mem = InstanceMemory(unit([[0.1, 1.0, 0.2, 0.0]]), unit([[0.0, 0.1, 0.2, 1.0]]))
    (rec,) = assign_pseudo_labels(mem, bank)
    assert (rec.label_f, rec.label_r, rec.label) == (1, 3, UNKNOWN)


def test_hand_placed_samples_match_distance_table():
    bank = PrototypeBank(unit([[1, 0], [0, 1]]), unit([[1, 1], [1, -1]]))
    f = unit([[1, 0.2], [0.3, 1], [1, 0.9], [-1, 0.5]])
    r = unit([[1, 0.8], [0.2, 1], [1, -0.1], [0.5, -1]])
    recs = assign_pseudo_labels(InstanceMemory(f, r), bank)
    for i, rec in enumerate(recs):
        df = [1 - f[i] @ c for c in bank.known_f]
        dr = [1 - r[i] @ c for c in bank.known_r]
        yf, yr = int(np.argmin(df)), int(np.argmin(dr))
        assert (rec.label_f, rec.label_r) == (yf, yr)
        assert rec.label == (yf if yf == yr else UNKNOWN)
    assert [rec.label for rec in recs] == [0, UNKNOWN, UNKNOWN, 1]


def test_ties_go_to_lowest_class():
    bank = PrototypeBank(unit([[1, 1], [1, -1]]), unit([[1, 1], [1, -1]]))
    (rec,) = assign_pseudo_labels(InstanceMemory(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])), bank)
    assert rec.label == 0


def test_pseudo_label_empty_inputs():
    with pytest.raises(ValueError):
        assign_pseudo_labels(InstanceMemory(np.zeros((0, 2)), np.zeros((0, 2))), PrototypeBank(np.eye(2), np.eye(2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_fused_rule(seed, c):
    r = np.random.default_rng(seed)
    bank = PrototypeBank(unit(r.normal(size=(c, 5))), unit(r.normal(size=(c, 3))))
    mem = InstanceMemory(unit(r.normal(size=(20, 5))), unit(r.normal(size=(20, 3))))
    for rec in assign_pseudo_labels(mem, bank):
        assert (rec.label == UNKNOWN) == (rec.label_r != rec.label_f)
        if rec.label != UNKNOWN:
            assert rec.label == rec.label_f


def test_kmeans_k_equals_n(rng):
    x = unit(rng.normal(size=(5, 3)))
    res = kmeans(x, 5, make_rng(0))
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(res.assignment.tolist()) == [0, 1, 2, 3, 4]
    np.testing.assert_allclose(res.centroids[res.assignment], x, atol=1e-12)


def test_kmeans_separated_pairs():
    x = unit([[1, 0.1, 0], [1, -0.1, 0], [0, 0.1, 1], [0, -0.1, 1]])
    res = kmeans(x, 2, make_rng(3))
    assert res.assignment[0] == res.assignment[1] != res.assignment[2] == res.assignment[3]
    np.testing.assert_allclose(res.centroids[res.assignment[0]], [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(res.centroids[res.assignment[2]], [0, 0, 1], atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_kmeans_matches_exhaustive_partitions(seed):
    r = np.random.default_rng(seed)
    x = unit(r.normal(size=(int(r.integers(3, 9)), 3)))
    res = kmeans(x, 2, make_rng(seed), restarts=50)
    assert res.inertia == pytest.approx(two_partition_optimum(x), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_inertia_non_increasing(seed):
    r = np.random.default_rng(seed)
    res = kmeans(r.normal(size=(60, 4)), 5, make_rng(seed), restarts=1)
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))


def test_kmeans_errors():
    with pytest.raises(ValueError, match="3 clusters"):
        kmeans(np.eye(2), 3, make_rng(0))
    with pytest.raises(ValueError):
        kmeans(np.eye(2), 0, make_rng(0))


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(30, 4))
    a = kmeans(x, 3, make_rng(9))
    b = kmeans(x, 3, make_rng(9))
    assert np.array_equal(a.assignment, b.assignment) and a.inertia == b.inertia


def test_silhouette_a_equals_b():
    # point 0 sits at 45 degrees between its own cluster mate and the other cluster
    x = unit([[1, 1], [1, 0], [0, 1]])
    rep = silhouette(x, [0, 0, 1])
    assert rep.a[0] == pytest.approx(rep.b[0], abs=1e-15)
    assert rep.s[0] == pytest.approx(0.0, abs=1e-12)


def test_silhouette_singleton_is_zero():
    rep = silhouette(unit([[1, 0], [1, 0.1], [0, 1]]), [0, 0, 1])
    assert rep.s[2] == 0.0


def test_silhouette_blobs(rng):
    x, lab = blobs(np.eye(6)[:2], 20, 0.02, rng)
    rep = silhouette(x, lab)
    # independent oracle: explicit double loop over pairs
    d = lambda i, j: 1 - x[i] @ x[j]
    for i in range(0, 40, 7):
        own = [j for j in range(40) if lab[j] == lab[i] and j != i]
        other = [j for j in range(40) if lab[j] != lab[i]]
        a = np.mean([d(i, j) for j in own])
        b = np.mean([d(i, j) for j in other])
        assert rep.s[i] == pytest.approx((b - a) / max(a, b), abs=1e-12)
    assert rep.mean > 0.9


def test_silhouette_needs_two_clusters():
    with pytest.raises(ValueError, match="two clusters"):
        silhouette(np.eye(3), [1, 1, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_silhouette_range(seed, k):
    r = np.random.default_rng(seed)
    lab = np.concatenate([np.arange(k), r.integers(0, k, 10)])
    s = silhouette(r.normal(size=(len(lab), 3)), lab).s
    assert np.all(s >= -1 - 1e-12) and np.all(s <= 1 + 1e-12)


def test_merging_separated_blobs_lowers_silhouette(rng):
    x, lab = blobs(np.eye(5)[:4], 10, 0.05, rng)
    separated = silhouette(x, lab).mean
    merged = silhouette(x, np.where(lab == 1, 0, lab)).mean
    assert merged <= separated


@pytest.mark.parametrize(
    "n_known,n_points,expected",
    [(4, 100, [2, 4, 8, 12]), (4, 5, [2, 4, 5]), (4, 2, [2]), (1, 50, [2, 3]), (6, 100, [2, 3, 6, 12, 18])],
)
def test_candidate_counts(n_known, n_points, expected):
    assert candidate_counts(n_known, n_points) == expected


def test_two_points_force_two_clusters():
    n_u, res, scores = select_unknown_count(unit([[1, 0], [0, 1]]), 4, make_rng(0))
    assert n_u == 2 and list(scores) == [2]


def test_select_degenerate():
    with pytest.raises(DegenerateClustering):
        select_unknown_count(np.ones((1, 3)), 4, make_rng(0))


@pytest.mark.parametrize("seed", range(5))
def test_select_finds_four_blobs(seed):
    r = np.random.default_rng(seed)
    x, _ = blobs(np.eye(8)[:4], 25, 0.05, r)
    n_u, res, _ = select_unknown_count(x, 4, make_rng(seed))
    assert n_u == 4 and res.n_clusters == 4


def test_select_deterministic(rng):
    x = rng.normal(size=(40, 5))
    a = select_unknown_count(x, 3, make_rng(2))
    b = select_unknown_count(x, 3, make_rng(2))
    assert a[0] == b[0] and np.array_equal(a[1].assignment, b[1].assignment) and a[2] == b[2]


def test_unknown_prototypes_examples():
    f = unit([[1, 0], [0, 1], [0.6, 0.8]])
    res = ClusterResult(2, np.array([0, 0, 1]), np.zeros((2, 2)), 0.0)
    w = unknown_prototypes(res, f)
    np.testing.assert_allclose(w[0], [S, S], atol=1e-15)
    np.testing.assert_allclose(w[1], f[2], atol=1e-15)


def test_unknown_prototypes_oracle(rng):
    f = unit(rng.normal(size=(20, 6)))
    assign = np.concatenate([np.arange(4), rng.integers(0, 4, 16)])
    w = unknown_prototypes(ClusterResult(4, assign, np.zeros((4, 6)), 0.0), f)
    for c in range(4):
        m = np.mean([f[i] for i in range(20) if assign[i] == c], axis=0)
        np.testing.assert_allclose(w[c], m / np.linalg.norm(m), atol=1e-12)


def test_unknown_prototypes_empty_cluster():
    with pytest.raises(ValueError, match="empty"):
        unknown_prototypes(ClusterResult(2, np.array([0, 0]), np.zeros((2, 2)), 0.0), np.eye(2))


@pytest.mark.parametrize(
    "flags,truth,expected",
    [
        ([1, 1, 0], [1, 1, 0], 1.0),
        ([0, 0, 0], [1, 0, 1], 1.0),
        ([1, 1, 1, 1, 0], [1, 1, 0, 1, 1], 0.75),
    ],
)
def test_inconsistency_precision(flags, truth, expected):
    assert inconsistency_precision(flags, truth) == expected


def test_inconsistency_precision_from_records():
    bank = PrototypeBank(np.eye(2), np.eye(2))
    recs = assign_pseudo_labels(InstanceMemory(np.eye(2), np.eye(2)[::-1]), bank)
    assert inconsistency_precision(recs, [True, False]) == 0.5


def test_farthest_quantile_flags():
    bank = PrototypeBank(np.eye(2), np.eye(2))
    f = unit([[1, 0], [1, 1], [1, 0.1], [-1, 0.2]])
    assert farthest_quantile_flags(InstanceMemory(f, f), bank, 0.5).tolist() == [False, True, False, True]


def test_detection_report(tmp_path):
    path = tmp_path / "det.csv"
    append_detection_report(path, {"epoch": 1, "n_inconsistent": 7, "n_u": 2, "mean_silhouette": 0.5, "incon_precision": 0.75})
    append_detection_report(path, {"epoch": 2, "n_inconsistent": 3, "n_u": 2, "mean_silhouette": 0.4, "incon_precision": 1.0})
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "n_inconsistent", "n_u", "mean_silhouette", "incon_precision"]
    assert rows[2] == ["2", "3", "2", "0.4", "1.0"]
