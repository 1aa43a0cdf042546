"""Dual-space pseudo-labels, clustering of the inconsistent samples, and
unknown-class prototypes.

Cosine distance is used everywhere in this module: for the nearest-prototype
labels, inside k-means, and for silhouette scores.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import InstanceMemory, PrototypeBank
from .numerics import cosine_distance_matrix, make_rng, normalize_rows

UNKNOWN = -1
CANDIDATE_FACTORS = (0.25, 0.5, 1.0, 2.0, 3.0)


class DegenerateClustering(ValueError):
    """Raised when there are too few points to choose a cluster count."""


@dataclass(frozen=True)
class PseudoLabelRecord:
    index: int
    label_r: int
    label_f: int
    label: int  # label_f, or UNKNOWN when the two spaces disagree


def nearest_labels(feats: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """argmin cosine distance per row; ties resolve to the lowest prototype index."""
    return np.argmin(cosine_distance_matrix(feats, prototypes), axis=1)


def pseudo_label_arrays(memory: InstanceMemory, bank: PrototypeBank):
    if bank.n_known < 1 or len(memory) == 0:
        raise ValueError("pseudo-labelling needs a nonempty memory and at least one known class")
    y_r = nearest_labels(memory.r, bank.known_r)
    y_f = nearest_labels(memory.f, bank.known_f)
    fused = np.where(y_r == y_f, y_f, UNKNOWN)
    return y_r, y_f, fused


def assign_pseudo_labels(memory: InstanceMemory, bank: PrototypeBank) -> list[PseudoLabelRecord]:
    y_r, y_f, fused = pseudo_label_arrays(memory, bank)
    return [PseudoLabelRecord(i, int(a), int(b), int(c)) for i, (a, b, c) in enumerate(zip(y_r, y_f, fused))]


def farthest_quantile_flags(memory: InstanceMemory, bank: PrototypeBank, quantile: float = 0.25) -> np.ndarray:
    """Single-space baseline: flag the samples farthest from their nearest image prototype."""
    d = cosine_distance_matrix(memory.f, bank.known_f).min(axis=1)
    n_flag = int(np.floor(quantile * len(d) + 0.5))
    flags = np.zeros(len(d), dtype=bool)
    if n_flag:
        flags[np.argsort(-d, kind="stable")[:n_flag]] = True
    return flags


# ---------------------------------------------------------------------------
# k-means (cosine)
# ---------------------------------------------------------------------------


@dataclass
class ClusterResult:
    n_clusters: int
    assignment: np.ndarray  # (n,) cluster id per point
    centroids: np.ndarray  # (k, D), unit rows
    inertia: float  # sum of cosine distances to assigned centroid
    history: list[float] = field(default_factory=list)  # inertia after each Lloyd step


def _centroids(x: np.ndarray, assign: np.ndarray, k: int, fallback: np.ndarray) -> np.ndarray:
    c = np.zeros((k, x.shape[1]))
    np.add.at(c, assign, x)
    norms = np.linalg.norm(c, axis=1)
    empty = norms == 0.0
    c[empty] = fallback[empty]
    norms[empty] = np.linalg.norm(c[empty], axis=1)
    return c / norms[:, None]


def _plus_plus_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    dist = 1.0 - x @ x[chosen[0]]
    for _ in range(1, k):
        w = np.clip(dist, 0.0, None)
        total = w.sum()
        if total <= 0.0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=w / total))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - x @ x[nxt])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int):
    k = len(centroids)
    assign = np.argmin(1.0 - x @ centroids.T, axis=1)
    history = []
    for _ in range(max_iter):
        centroids = _centroids(x, assign, k, centroids)
        dist = 1.0 - x @ centroids.T
        inertia = float(dist[np.arange(len(x)), assign].sum())
        history.append(inertia)
        new_assign = np.argmin(dist, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    centroids = _centroids(x, assign, k, centroids)
    inertia = float((1.0 - np.sum(x * centroids[assign], axis=1)).sum())
    history.append(inertia)
    return assign, centroids, inertia, history


def kmeans(points, k: int, rng: np.random.Generator, restarts: int = 10, max_iter: int = 100) -> ClusterResult:
    """Spherical (cosine) k-means with k-means++ seeding; best inertia over restarts."""
    x = normalize_rows(np.asarray(points, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(x):
        raise ValueError(f"cannot form {k} clusters from {len(x)} points")
    best = None
    for _ in range(max(1, restarts)):
        assign, cents, inertia, hist = _lloyd(x, _plus_plus_seeds(x, k, rng), max_iter)
        if best is None or inertia < best.inertia - 1e-12:
            best = ClusterResult(k, assign, cents, inertia, hist)
    return best


# ---------------------------------------------------------------------------
# silhouette model selection
# ---------------------------------------------------------------------------


@dataclass
class SilhouetteReport:
    a: np.ndarray
    b: np.ndarray
    s: np.ndarray
    mean: float


def silhouette(points, assignment) -> SilhouetteReport:
    x = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment)
    labels = np.unique(assignment)
    if len(labels) < 2:
        raise ValueError("silhouette needs at least two clusters")
    dist = cosine_distance_matrix(x, x)
    n = len(x)
    a = np.zeros(n)
    b = np.full(n, np.inf)
    sizes = {lab: int(np.sum(assignment == lab)) for lab in labels}
    for lab in labels:
        members = assignment == lab
        mean_to = dist[:, members].sum(axis=1)
        own = members
        if sizes[lab] > 1:
            a[own] = mean_to[own] / (sizes[lab] - 1)
        b[~own] = np.minimum(b[~own], mean_to[~own] / sizes[lab])
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    singleton = np.array([sizes[lab] == 1 for lab in assignment])
    s[singleton] = 0.0
    return SilhouetteReport(a, b, s, float(s.mean()))


def candidate_counts(n_known: int, n_points: int) -> list[int]:
    raw = [int(np.floor(g * n_known + 0.5)) for g in CANDIDATE_FACTORS]
    return sorted({min(max(c, 2), n_points) for c in raw})


def select_unknown_count(points, n_known: int, rng: np.random.Generator, restarts: int = 10):
    """Cluster with each candidate count; keep the highest mean silhouette (ties: smaller count).

    Returns (n_u, ClusterResult, {count: mean silhouette}).
    """
    x = np.asarray(points, dtype=np.float64)
    if len(x) < 2:
        raise DegenerateClustering(f"need at least 2 points to cluster, got {len(x)}")
    cands = candidate_counts(n_known, len(x))
    seeds = rng.integers(0, 2**63 - 1, size=len(cands))
    best_k, best_res, best_s = None, None, -np.inf
    scores = {}
    for k, seed in zip(cands, seeds):
        res = kmeans(x, k, make_rng(int(seed)), restarts=restarts)
        if len(np.unique(res.assignment)) < 2:
            s = -1.0
        else:
            s = silhouette(x, res.assignment).mean
        scores[k] = s
        if s > best_s:
            best_k, best_res, best_s = k, res, s
    return best_k, best_res, scores


def unknown_prototypes(result: ClusterResult, image_feats) -> np.ndarray:
    f = np.asarray(image_feats, dtype=np.float64)
    protos = []
    for c in range(result.n_clusters):
        members = f[result.assignment == c]
        if len(members) == 0:
            raise ValueError(f"cluster {c} is empty")
        protos.append(members.mean(axis=0))
    return normalize_rows(np.array(protos))


def inconsistency_precision(flags_or_records, truly_unknown) -> float:
    """Fraction of flagged samples that are truly unknown (1.0 when nothing is flagged)."""
    if len(flags_or_records) and isinstance(flags_or_records[0], PseudoLabelRecord):
        flags = np.array([rec.label == UNKNOWN for rec in flags_or_records])
    else:
        flags = np.asarray(flags_or_records, dtype=bool)
    truth = np.asarray(truly_unknown, dtype=bool)
    n = int(flags.sum())
    if n == 0:
        return 1.0
    return float(np.sum(flags & truth) / n)


DETECTION_COLUMNS = ["epoch", "n_inconsistent", "n_u", "mean_silhouette", "incon_precision"]


def append_detection_report(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DETECTION_COLUMNS, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow(row)
