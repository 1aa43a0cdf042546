"""Prototype banks and per-instance target memories in both feature spaces.

Every stored vector is re-normalized after a momentum blend so that inner
products stay cosine similarities.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import normalize_rows


def check_momentum(m: float) -> float:
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    return float(m)


def momentum_blend(stored: np.ndarray, new: np.ndarray, m: float) -> np.ndarray:
    """``m * stored + (1 - m) * new`` without normalization."""
    return m * stored + (1.0 - m) * new


@dataclass
class PrototypeBank:
    known_f: np.ndarray  # (C, D)
    known_r: np.ndarray  # (C, R)
    unknown_f: np.ndarray = field(default=None)  # (n_u, D)

    def __post_init__(self):
        if self.unknown_f is None:
            self.unknown_f = np.zeros((0, self.known_f.shape[1]))

    @property
    def n_known(self) -> int:
        return self.known_f.shape[0]

    @property
    def n_unknown(self) -> int:
        return self.unknown_f.shape[0]

    def image_prototypes(self) -> np.ndarray:
        """Known prototypes followed by unknown prototypes."""
        return np.concatenate([self.known_f, self.unknown_f], axis=0)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.known_f.copy(), self.known_r.copy(), self.unknown_f.copy())


@dataclass
class InstanceMemory:
    f: np.ndarray  # (N_t, D)
    r: np.ndarray  # (N_t, R)

    def __len__(self) -> int:
        return self.f.shape[0]

    def copy(self) -> "InstanceMemory":
        return InstanceMemory(self.f.copy(), self.r.copy())


def init_known_prototypes(f: np.ndarray, r: np.ndarray, labels, n_classes: int) -> PrototypeBank:
    """Per-class means of source features in both spaces, L2-normalized."""
    labels = np.asarray(labels)
    kf, kr = [], []
    for k in range(n_classes):
        sel = labels == k
        if not np.any(sel):
            raise ValueError(f"known class {k} has no source samples")
        kf.append(f[sel].mean(axis=0))
        kr.append(r[sel].mean(axis=0))
    return PrototypeBank(normalize_rows(np.array(kf)), normalize_rows(np.array(kr)))


def momentum_update_prototype(bank: PrototypeBank, k: int, batch_f, batch_r, m: float) -> PrototypeBank:
    """Blend class ``k``'s prototypes toward the batch means; empty batch is a no-op."""
    m = check_momentum(m)
    batch_f = np.asarray(batch_f, dtype=np.float64).reshape(-1, bank.known_f.shape[1])
    batch_r = np.asarray(batch_r, dtype=np.float64).reshape(-1, bank.known_r.shape[1])
    if len(batch_f) == 0 or m == 1.0:
        return bank
    bank.known_f[k] = normalize_rows(momentum_blend(bank.known_f[k], batch_f.mean(axis=0), m))
    bank.known_r[k] = normalize_rows(momentum_blend(bank.known_r[k], batch_r.mean(axis=0), m))
    return bank


def update_prototypes_from_batch(bank: PrototypeBank, f, r, labels, m: float) -> PrototypeBank:
    labels = np.asarray(labels)
    for k in np.unique(labels):
        sel = labels == k
        momentum_update_prototype(bank, int(k), f[sel], r[sel], m)
    return bank


def momentum_update_instance(mem: InstanceMemory, i: int, new_r, new_f, m: float) -> InstanceMemory:
    m = check_momentum(m)
    if not 0 <= i < len(mem):
        raise IndexError(f"instance {i} is not in a memory of size {len(mem)}")
    mem.r[i] = normalize_rows(momentum_blend(mem.r[i], np.asarray(new_r), m))
    mem.f[i] = normalize_rows(momentum_blend(mem.f[i], np.asarray(new_f), m))
    return mem


def update_instances(mem: InstanceMemory, idx, new_f, new_r, m: float) -> InstanceMemory:
    m = check_momentum(m)
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= len(mem)):
        raise IndexError("instance index out of range")
    mem.f[idx] = normalize_rows(momentum_blend(mem.f[idx], new_f, m))
    mem.r[idx] = normalize_rows(momentum_blend(mem.r[idx], new_r, m))
    return mem


def export_csv(path, bank: PrototypeBank | None = None, memory: InstanceMemory | None = None) -> Path:
    """One row per stored vector: kind, index, space, then components."""
    path = Path(path)
    rows = []
    if bank is not None:
        rows += [("known", i, "f", v) for i, v in enumerate(bank.known_f)]
        rows += [("known", i, "r", v) for i, v in enumerate(bank.known_r)]
        rows += [("unknown", i, "f", v) for i, v in enumerate(bank.unknown_f)]
    if memory is not None:
        rows += [("instance", i, "f", v) for i, v in enumerate(memory.f)]
        rows += [("instance", i, "r", v) for i, v in enumerate(memory.r)]
    width = max((len(v) for *_, v in rows), default=0)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", "space"] + [f"v{j}" for j in range(width)])
        for kind, i, space, v in rows:
            w.writerow([kind, i, space] + [repr(float(x)) for x in v])
    return path
