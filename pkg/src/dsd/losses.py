"""Prototype contrastive loss and expert-balance regularizers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .grmoe import BalanceStats

DEFAULT_GAMMA = 100.0


def _find_row(protos: np.ndarray, z: np.ndarray, tol: float = 1e-12) -> int:
    hits = np.flatnonzero(np.max(np.abs(protos - z), axis=1) <= tol)
    if len(hits) == 0:
        raise ValueError("positive prototype is not one of the known or unknown prototypes")
    return int(hits[0])


def contrastive_loss(f, positive, known, unknown=()) -> tuple[float, np.ndarray]:
    """-log softmax over prototype inner products at the positive; returns (loss, dloss/df)."""
    f = np.asarray(f, dtype=np.float64)
    protos = np.asarray(known, dtype=np.float64).reshape(-1, f.size)
    unknown = np.asarray(unknown, dtype=np.float64).reshape(-1, f.size)
    protos = np.concatenate([protos, unknown], axis=0)
    pos = _find_row(protos, np.asarray(positive, dtype=np.float64))
    logits = protos @ f
    shift = logits.max()
    p = np.exp(logits - shift)
    p /= p.sum()
    loss = float(np.log(np.exp(logits - shift).sum()) + shift - logits[pos])
    return loss, protos.T @ p - protos[pos]


def contrastive_loss_batch(f: Tensor, prototypes: np.ndarray, positive: np.ndarray) -> Tensor:
    """Mean contrastive loss over a batch of features (B, D); prototypes receive no gradient."""
    logits = f @ Tensor(prototypes.T)  # (B, P)
    shift = logits.data.max(axis=1, keepdims=True)
    lse = ag.log(ag.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    picked = logits[np.arange(len(positive)), positive]
    return (lse - picked).mean()


def nearest_prototype(f: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Index of the most similar prototype (largest inner product) per row."""
    return np.argmax(np.atleast_2d(f) @ prototypes.T, axis=1)


def squared_cv_tensor(v: Tensor) -> Tensor:
    mu = v.mean()
    d = v - mu
    return (d * d).mean() / (mu * mu)


def importance_loss(stats: BalanceStats) -> Tensor:
    return squared_cv_tensor(ag.as_tensor(stats.importance))


def load_loss(stats: BalanceStats) -> Tensor:
    return squared_cv_tensor(ag.as_tensor(stats.load))


@dataclass
class LossBreakdown:
    l_con: float
    l_imp: float
    l_load: float
    l_blc: float
    total: float
    gamma: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)


def total_loss(l_con, stats: BalanceStats | Sequence[BalanceStats], gamma: float = DEFAULT_GAMMA) -> LossBreakdown:
    """L_con + gamma * (L_imp + L_load) / 2, balance terms averaged over MoE layers."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if isinstance(stats, BalanceStats):
        stats = [stats]
    l_con = ag.as_tensor(l_con)
    if stats:
        imp = sum((importance_loss(s) for s in stats), Tensor(0.0)) * (1.0 / len(stats))
        load = sum((load_loss(s) for s in stats), Tensor(0.0)) * (1.0 / len(stats))
    else:
        imp = load = Tensor(0.0)
    blc = (imp + load) * 0.5
    obj = l_con + blc * gamma
    parts = [l_con.item(), imp.item(), load.item()]
    if not np.all(np.isfinite(parts)):
        raise FloatingPointError(f"non-finite loss component: {parts}")
    return LossBreakdown(parts[0], parts[1], parts[2], blc.item(), obj.item(), float(gamma), obj)


def breakdown_from_parts(l_con: float, l_imp: float, l_load: float, gamma: float = DEFAULT_GAMMA) -> LossBreakdown:
    blc = 0.5 * (l_imp + l_load)
    return LossBreakdown(l_con, l_imp, l_load, blc, l_con + gamma * blc, gamma)
