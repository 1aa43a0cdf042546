"""Source pretraining, dual-space adaptation epochs, inference and OSDA metrics.

Training code only ever touches ``split.source_x``, ``split.source_y`` and
``split.target_x``. Target labels are read through ``HiddenLabels.reveal`` by
the evaluation helpers in this module and nowhere else.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetSplit
from .detection import (
    UNKNOWN,
    DegenerateClustering,
    farthest_quantile_flags,
    inconsistency_precision,
    pseudo_label_arrays,
    select_unknown_count,
    unknown_prototypes,
)
from .encoder import EncoderConfig, ImageSample, encode, encode_arrays, init_params
from .grmoe import build_patch_graph
from .losses import contrastive_loss_batch, nearest_prototype, total_loss
from .memory import InstanceMemory, PrototypeBank, init_known_prototypes, update_instances, update_prototypes_from_batch
from .numerics import make_rng, rng_from_state, rng_state, squared_cv

log = logging.getLogger(__name__)

LOG_COLUMNS = [
    "phase",
    "epoch",
    "l_con",
    "l_imp",
    "l_load",
    "total",
    "n_inconsistent",
    "n_u",
    "incon_precision",
    "os_star",
    "unk",
    "hos",
    "mean_silhouette",
]


@dataclass
class TrainState:
    config: RunConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    bank: PrototypeBank
    rng: np.random.Generator
    memory: InstanceMemory | None = None
    pretrain_epoch: int = 0
    adapt_epoch: int = 0
    history: list[dict] = field(default_factory=list)
    # detection outcome of the most recent adaptation epoch
    last_flags: np.ndarray | None = None
    last_n_u: int = 0
    last_silhouette: float = float("nan")

    @property
    def memories_ready(self) -> bool:
        return self.memory is not None


class Metrics(NamedTuple):
    os_star: float
    unk: float
    hos: float


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_nesterov_step(params, grads, velocity, lr: float, momentum: float = 0.9, weight_decay: float = 1e-3) -> None:
    """In-place SGD with Nesterov momentum and L2 weight decay."""
    for name in sorted(params):
        g = grads[name] + weight_decay * params[name]
        v = momentum * velocity[name] + g
        velocity[name] = v
        params[name] = params[name] - lr * (g + momentum * v)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    # fixed summation order keeps the norm independent of dict insertion order
    norm = float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def _check_source(split: DatasetSplit) -> None:
    if split.n_source == 0:
        raise ValueError("source set is empty")
    missing = sorted(set(range(split.n_known)) - set(np.unique(split.source_y).tolist()))
    if missing:
        raise ValueError(f"known class {missing[0]} has no source samples")


def init_state(cfg: RunConfig, split: DatasetSplit) -> TrainState:
    _check_source(split)
    rng = make_rng(cfg.train.seed)
    params = init_params(cfg.model, rng)
    f, r = encode_arrays(split.source_x, cfg.model, params)
    bank = init_known_prototypes(f, r, split.source_y, split.n_known)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(cfg, params, velocity, bank, rng)


def _train_step(state: TrainState, pixels: np.ndarray, positives: Callable[[np.ndarray], np.ndarray], lr: float, graph):
    cfg = state.config
    tp = {k: ag.Tensor(v, requires_grad=True) for k, v in state.params.items()}
    res = encode(pixels, cfg.model, tp, noise=state.rng, graph=graph)
    protos = state.bank.image_prototypes()
    pos = positives(res.f.data)
    l_con = contrastive_loss_batch(res.f, protos, pos)
    parts = total_loss(l_con, res.stats, cfg.train.gamma)
    grads = _gradients(tp, l_con, parts.objective, cfg.train.balance_clip)
    sgd_nesterov_step(state.params, grads, state.velocity, lr, cfg.train.sgd_momentum, cfg.train.weight_decay)
    return parts, res.f.data, res.r.data


def _collect(tp: dict[str, ag.Tensor]) -> dict[str, np.ndarray]:
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tp.items()}
    for t in tp.values():
        t.grad = None
    return grads


def _gradients(tp, l_con: ag.Tensor, objective: ag.Tensor, balance_clip: float) -> dict[str, np.ndarray]:
    """Parameter gradients of the objective.

    With ``balance_clip > 0`` the weighted balance term is back-propagated on
    its own and its global norm capped before it joins the contrastive gradient.
    """
    if balance_clip <= 0:
        objective.backward()
        return _collect(tp)
    l_con.backward()
    grads = _collect(tp)
    (objective - l_con).backward()
    blc = _collect(tp)
    clip_gradients(blc, balance_clip)
    return {k: grads[k] + blc[k] for k in grads}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _mean_parts(parts) -> dict:
    if not parts:
        return {"l_con": 0.0, "l_imp": 0.0, "l_load": 0.0, "total": 0.0}
    return {
        "l_con": float(np.mean([p.l_con for p in parts])),
        "l_imp": float(np.mean([p.l_imp for p in parts])),
        "l_load": float(np.mean([p.l_load for p in parts])),
        "total": float(np.mean([p.total for p in parts])),
    }


def pretrain_epoch(state: TrainState, split: DatasetSplit) -> dict:
    """One epoch of supervised contrastive training on the source domain."""
    cfg = state.config
    graph = build_patch_graph(*cfg.model.grid)
    m = cfg.train.memory_momentum
    parts = []
    for idx in _batches(split.n_source, cfg.train.batch_size, state.rng):
        labels = split.source_y[idx]
        p, f, r = _train_step(state, split.source_x[idx], lambda _f: labels, cfg.train.pretrain_lr, graph)
        update_prototypes_from_batch(state.bank, f, r, labels, m)
        parts.append(p)
    state.pretrain_epoch += 1
    row = {"phase": "pretrain", "epoch": state.pretrain_epoch, **_mean_parts(parts)}
    state.history.append(row)
    return row


def fill_memories(state: TrainState, split: DatasetSplit) -> None:
    """Full forward pass: known prototypes from source, instance memory from target."""
    f, r = encode_arrays(split.source_x, state.config.model, state.params)
    bank = init_known_prototypes(f, r, split.source_y, split.n_known)
    bank.unknown_f = state.bank.unknown_f
    state.bank = bank
    tf, tr = encode_arrays(split.target_x, state.config.model, state.params)
    state.memory = InstanceMemory(tf, tr)


def pretrain_source(split: DatasetSplit, cfg: RunConfig) -> TrainState:
    state = init_state(cfg, split)
    while state.pretrain_epoch < cfg.train.pretrain_epochs:
        pretrain_epoch(state, split)
    fill_memories(state, split)
    return state


def detect_unknowns(state: TrainState, n_known: int):
    """Flag target samples as unknown candidates and refresh unknown prototypes.

    Returns the boolean flags over the target memory.
    """
    cfg = state.config
    if cfg.detect.mode == "dual":
        _, _, fused = pseudo_label_arrays(state.memory, state.bank)
        flags = fused == UNKNOWN
    else:
        flags = farthest_quantile_flags(state.memory, state.bank, cfg.detect.single_quantile)
    pts = state.memory.f[flags]
    sub_rng = make_rng(int(state.rng.integers(0, 2**63 - 1)))
    try:
        n_u, result, scores = select_unknown_count(pts, n_known, sub_rng, restarts=cfg.detect.kmeans_restarts)
    except DegenerateClustering:
        log.info("fewer than 2 flagged samples; keeping previous unknown prototypes")
        state.last_silhouette = float("nan")
    else:
        state.bank.unknown_f = unknown_prototypes(result, pts)
        state.last_n_u = n_u
        state.last_silhouette = float(scores[n_u])
    state.last_flags = flags
    return flags


def adapt_epoch(state: TrainState, split: DatasetSplit) -> TrainState:
    """Pseudo-label, cluster the inconsistent set, then one pass of contrastive training."""
    if not state.memories_ready:
        raise RuntimeError("memories are not initialised; run pretraining first")
    cfg = state.config
    flags = detect_unknowns(state, split.n_known)
    graph = build_patch_graph(*cfg.model.grid)
    m = cfg.train.memory_momentum
    ns = split.n_source
    all_x = np.concatenate([split.source_x, split.target_x], axis=0)
    parts = []
    for idx in _batches(ns + split.n_target, cfg.train.batch_size, state.rng):
        is_src = idx < ns
        src_labels = split.source_y[idx[is_src]]

        def positives(f, is_src=is_src, src_labels=src_labels):
            pos = nearest_prototype(f, state.bank.image_prototypes())
            if cfg.train.source_label_override:
                pos[is_src] = src_labels
            return pos

        p, f, r = _train_step(state, all_x[idx], positives, cfg.train.lr, graph)
        if np.any(is_src):
            update_prototypes_from_batch(state.bank, f[is_src], r[is_src], src_labels, m)
        if np.any(~is_src):
            update_instances(state.memory, idx[~is_src] - ns, f[~is_src], r[~is_src], m)
        parts.append(p)
    state.adapt_epoch += 1
    state.history.append(
        {
            "phase": "adapt",
            "epoch": state.adapt_epoch,
            **_mean_parts(parts),
            "n_inconsistent": int(flags.sum()),
            "n_u": state.last_n_u,
            "mean_silhouette": state.last_silhouette,
        }
    )
    return state


# ---------------------------------------------------------------------------
# inference and metrics
# ---------------------------------------------------------------------------


def classify_features(f: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Nearest prototype by cosine distance; unknown prototypes map to UNKNOWN.

    Known prototypes come first, so ties favour known classes, then lower ids.
    """
    protos = bank.image_prototypes()
    fn = f / np.linalg.norm(f, axis=1, keepdims=True)
    pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    idx = np.argmin(1.0 - fn @ pn.T, axis=1)
    return np.where(idx < bank.n_known, idx, UNKNOWN)


def predict(state: TrainState, pixels: np.ndarray) -> np.ndarray:
    f, _ = encode_arrays(pixels, state.config.model, state.params)
    return classify_features(f, state.bank)


def infer(state: TrainState, sample: ImageSample | np.ndarray) -> int:
    pixels = sample.pixels if isinstance(sample, ImageSample) else sample
    return int(predict(state, np.asarray(pixels)[None])[0])


def hos(os_star: float, unk: float) -> float:
    if os_star <= 0.0 or unk <= 0.0:
        return 0.0
    return 2.0 * os_star * unk / (os_star + unk)


def metrics_from_predictions(pred, truth, n_known: int) -> Metrics:
    """OS* (mean per-class accuracy over known classes), UNK and HOS."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    accs = []
    for k in range(n_known):
        sel = truth == k
        if np.any(sel):
            accs.append(float(np.mean(pred[sel] == k)))
    os_star = float(np.mean(accs)) if accs else 0.0
    unk_sel = truth >= n_known
    unk = float(np.mean(pred[unk_sel] == UNKNOWN)) if np.any(unk_sel) else 0.0
    return Metrics(os_star, unk, hos(os_star, unk))


def evaluate(state: TrainState, split: DatasetSplit) -> Metrics:
    return metrics_from_predictions(predict(state, split.target_x), split.target_labels.reveal(), split.n_known)


def importance_cv_per_layer(state: TrainState, pixels: np.ndarray, batch_size: int = 256) -> list[float]:
    """Squared CV of expert importance for each MoE layer over a full inference pass."""
    cfg = state.config.model
    graph = build_patch_graph(*cfg.grid)
    totals = None
    for start in range(0, len(pixels), batch_size):
        res = encode(pixels[start : start + batch_size], cfg, state.params, graph=graph)
        imp = [s.imp for s in res.stats]
        totals = imp if totals is None else [a + b for a, b in zip(totals, imp)]
    return [squared_cv(t) for t in totals]


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def _annotate(state: TrainState, split: DatasetSplit) -> None:
    """Attach evaluation columns (reads hidden labels) to the newest log row."""
    row = state.history[-1]
    truth = split.target_labels.reveal()
    if state.memories_ready:
        met = evaluate(state, split)
        row.update(os_star=met.os_star, unk=met.unk, hos=met.hos)
    if row["phase"] == "adapt" and state.last_flags is not None:
        row["incon_precision"] = inconsistency_precision(state.last_flags, truth >= split.n_known)


def train(
    cfg: RunConfig,
    split: DatasetSplit,
    state: TrainState | None = None,
    evaluate_each_epoch: bool = True,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Pretrain then adapt until the configured epoch counts are reached (resumable)."""
    if state is None:
        state = init_state(cfg, split)
    while state.pretrain_epoch < cfg.train.pretrain_epochs:
        pretrain_epoch(state, split)
        log.info("pretrain epoch %d: %s", state.pretrain_epoch, state.history[-1])
        if on_epoch:
            on_epoch(state)
    if not state.memories_ready:
        fill_memories(state, split)
    while state.adapt_epoch < cfg.train.adapt_epochs:
        adapt_epoch(state, split)
        if evaluate_each_epoch:
            _annotate(state, split)
        log.info("adapt epoch %d: %s", state.adapt_epoch, state.history[-1])
        if on_epoch:
            on_epoch(state)
    return state


def write_csv(path, columns: list[str], rows: list[dict], config: RunConfig | None = None) -> Path:
    """Plain CSV; with ``config`` the first line is a ``#`` comment echoing it as JSON."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv` (config comment skipped), values as strings."""
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_training_log(history: list[dict], path, config: RunConfig | None = None) -> Path:
    return write_csv(path, LOG_COLUMNS, history, config)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_state(state: TrainState, path) -> Path:
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"vel/{k}": v for k, v in state.velocity.items()})
    arrays["bank/known_f"] = state.bank.known_f
    arrays["bank/known_r"] = state.bank.known_r
    arrays["bank/unknown_f"] = state.bank.unknown_f
    if state.memory is not None:
        arrays["mem/f"] = state.memory.f
        arrays["mem/r"] = state.memory.r
    header = {
        "format": "dsd-train-state",
        "config": state.config.to_dict(),
        "rng": rng_state(state.rng),
        "pretrain_epoch": state.pretrain_epoch,
        "adapt_epoch": state.adapt_epoch,
        "last_n_u": state.last_n_u,
        "history": [{k: (float(v) if isinstance(v, np.floating) else v) for k, v in row.items()} for row in state.history],
    }
    return save_checkpoint(path, arrays, header)


def load_state(path, config: RunConfig | None = None) -> TrainState:
    header, arrays = load_checkpoint(path)
    if header.get("format") != "dsd-train-state":
        raise ValueError(f"{path} does not hold a training state")
    cfg = config if config is not None else RunConfig.from_dict(header["config"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    velocity = {k[4:]: v for k, v in arrays.items() if k.startswith("vel/")}
    bank = PrototypeBank(arrays["bank/known_f"], arrays["bank/known_r"], arrays["bank/unknown_f"])
    memory = InstanceMemory(arrays["mem/f"], arrays["mem/r"]) if "mem/f" in arrays else None
    return TrainState(
        config=cfg,
        params=params,
        velocity=velocity,
        bank=bank,
        rng=rng_from_state(header["rng"]),
        memory=memory,
        pretrain_epoch=header["pretrain_epoch"],
        adapt_epoch=header["adapt_epoch"],
        history=header["history"],
        last_n_u=header.get("last_n_u", 0),
    )
