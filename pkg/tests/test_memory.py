import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsd.memory import (
    InstanceMemory,
    PrototypeBank,
    init_known_prototypes,
    momentum_update_instance,
    momentum_update_prototype,
    update_instances,
    update_prototypes_from_batch,
    export_csv,
)

from conftest import unit

S = 1 / np.sqrt(2)


def test_init_single_sample_class():
    f = unit([[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]])
    r = unit([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    bank = init_known_prototypes(f, r, [0, 1, 1], 2)
    np.testing.assert_allclose(bank.known_f[0], f[0])
    np.testing.assert_allclose(bank.known_r[0], r[0])
    np.testing.assert_allclose(bank.known_f[1], [S, S], atol=1e-15)
    assert bank.n_unknown == 0


def test_init_matches_brute_force(rng):
    f = unit(rng.normal(size=(15, 6)))
    r = unit(rng.normal(size=(15, 4)))
    labels = np.repeat([0, 1, 2], 5)
    rng.shuffle(labels)
    bank = init_known_prototypes(f, r, labels, 3)
    for k in range(3):
        mf = sum(f[i] for i in range(15) if labels[i] == k) / 5
        mr = sum(r[i] for i in range(15) if labels[i] == k) / 5
        np.testing.assert_allclose(bank.known_f[k], mf / np.sqrt(np.dot(mf, mf)), atol=1e-12)
        np.testing.assert_allclose(bank.known_r[k], mr / np.sqrt(np.dot(mr, mr)), atol=1e-12)


def test_init_empty_class_named():
    with pytest.raises(ValueError, match="class 2"):
        init_known_prototypes(np.eye(2), np.eye(2), [0, 1], 3)


def fresh_bank():
    return PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_prototype_m1_is_identity():
    bank = fresh_bank()
    before = bank.copy()
    momentum_update_prototype(bank, 0, [[0.0, 1.0]], [[0.0, 1.0]], 1.0)
    assert np.array_equal(bank.known_f, before.known_f) and np.array_equal(bank.known_r, before.known_r)


def test_prototype_m0_takes_batch_mean():
    bank = fresh_bank()
    momentum_update_prototype(bank, 0, [[0.0, 1.0], [1.0, 1.0]], [[0.0, 2.0], [0.0, 1.0]], 0.0)
    np.testing.assert_allclose(bank.known_f[0], unit([0.5, 1.0]), atol=1e-15)
    np.testing.assert_allclose(bank.known_r[0], [0.0, 1.0], atol=1e-15)


def test_prototype_m099_example():
    bank = fresh_bank()
    momentum_update_prototype(bank, 0, [[0.0, 1.0]], [[0.0, 1.0]], 0.99)
    n = np.hypot(0.99, 0.01)
    np.testing.assert_allclose(bank.known_f[0], [0.99 / n, 0.01 / n], atol=1e-15)
    # other class untouched
    assert bank.known_f[1].tolist() == [0.0, 1.0]


def test_prototype_empty_batch_noop():
    bank = fresh_bank()
    momentum_update_prototype(bank, 1, np.zeros((0, 2)), np.zeros((0, 2)), 0.5)
    assert bank.known_f[1].tolist() == [0.0, 1.0]


def test_batch_update_groups_by_label():
    bank = fresh_bank()
    update_prototypes_from_batch(bank, np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 1], 0.0)
    np.testing.assert_allclose(bank.known_f, [[0.0, 1.0], [1.0, 0.0]])


@pytest.mark.parametrize("m", [-0.1, 1.5])
def test_bad_momentum(m):
    with pytest.raises(ValueError, match="momentum"):
        momentum_update_prototype(fresh_bank(), 0, [[1.0, 0.0]], [[1.0, 0.0]], m)


def test_instance_m0_replaces():
    mem = InstanceMemory(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    momentum_update_instance(mem, 0, [0.0, 0.0, 1.0], [0.0, 1.0], 0.0)
    assert mem.f[0].tolist() == [0.0, 1.0] and mem.r[0].tolist() == [0.0, 0.0, 1.0]


def test_instance_m05_example():
    mem = InstanceMemory(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    momentum_update_instance(mem, 0, [0.0, 1.0], [0.0, 1.0], 0.5)
    np.testing.assert_allclose(mem.f[0], [S, S], atol=1e-15)
    np.testing.assert_allclose(mem.r[0], [S, S], atol=1e-15)


@pytest.mark.parametrize("i", [-1, 3])
def test_instance_bad_index(i):
    mem = InstanceMemory(np.eye(3), np.eye(3))
    with pytest.raises(IndexError):
        momentum_update_instance(mem, i, [1.0, 0, 0], [1.0, 0, 0], 0.5)
    with pytest.raises(IndexError):
        update_instances(mem, [0, i], np.eye(3)[:2], np.eye(3)[:2], 0.5)


@pytest.mark.parametrize("m", [0.0, 0.3, 0.9, 0.99])
def test_pre_norm_distance_contracts_by_m(m, rng):
    v = unit(rng.normal(size=5))
    c = unit(rng.normal(size=5))
    for _ in range(20):
        blended = m * c + (1 - m) * v
        np.testing.assert_allclose(np.linalg.norm(blended - v), m * np.linalg.norm(c - v), atol=1e-12)
        mem = InstanceMemory(c[None].copy(), c[None].copy())
        momentum_update_instance(mem, 0, v, v, m)
        c = mem.f[0]


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 2**31))
def test_angle_to_constant_target_non_increasing(m, seed):
    r = np.random.default_rng(seed)
    v = unit(r.normal(size=4))
    mem = InstanceMemory(unit(r.normal(size=(1, 4))), unit(r.normal(size=(1, 4))))
    # cosine rather than arccos: arccos loses ~1e-8 near zero angle
    prev = -np.inf
    for _ in range(15):
        update_instances(mem, [0], v[None], v[None], m)
        cos = mem.f[0] @ v
        assert cos >= prev - 1e-15
        prev = cos


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_updates_keep_unit_norm(m, seed):
    r = np.random.default_rng(seed)
    bank = PrototypeBank(unit(r.normal(size=(3, 4))), unit(r.normal(size=(3, 2))))
    mem = InstanceMemory(unit(r.normal(size=(6, 4))), unit(r.normal(size=(6, 2))))
    for _ in range(5):
        idx = r.choice(6, size=3, replace=False)
        update_instances(mem, idx, unit(r.normal(size=(3, 4))), unit(r.normal(size=(3, 2))), m)
        update_prototypes_from_batch(bank, unit(r.normal(size=(4, 4))), unit(r.normal(size=(4, 2))), r.integers(0, 3, 4), m)
    for a in (bank.known_f, bank.known_r, mem.f, mem.r):
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9)


def test_export_csv(tmp_path):
    bank = fresh_bank()
    bank.unknown_f = np.array([[S, S]])
    mem = InstanceMemory(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    path = export_csv(tmp_path / "mem.csv", bank, mem)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["kind", "index", "space", "v0", "v1", "v2"]
    assert len(rows) == 1 + 2 + 2 + 1 + 2
    assert rows[5][:3] == ["unknown", "0", "f"] and float(rows[5][3]) == S
    assert rows[-1] == ["instance", "0", "r", "0.0", "1.0", "0.0"]
