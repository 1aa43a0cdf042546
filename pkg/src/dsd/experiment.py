"""Multi-run helpers: dual vs single-space comparisons and ablation sweeps."""
from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import DatasetSplit, generate
from .pipeline import Metrics, TrainState, evaluate, importance_cv_per_layer, predict, train

ABLATION_AXES = ("router", "n_experts", "top_k", "momentum", "gamma", "placement", "detection")


@dataclass
class RunSummary:
    label: str
    seed: int
    metrics: Metrics
    incon_precision: float
    importance_cv: list[float]
    history: list[dict]
    seconds: float
    source_accuracy: float = float("nan")


def fork_state(state: TrainState, cfg: RunConfig) -> TrainState:
    """Independent copy of a training state running under ``cfg``."""
    twin = copy.deepcopy(state)
    twin.config = cfg
    return twin


def _summary(label: str, seed: int, state: TrainState, split: DatasetSplit, seconds: float) -> RunSummary:
    adapt = [r for r in state.history if r["phase"] == "adapt"]
    prec = float(adapt[-1].get("incon_precision", np.nan)) if adapt else float("nan")
    return RunSummary(
        label,
        seed,
        evaluate(state, split),
        prec,
        importance_cv_per_layer(state, split.target_x),
        state.history,
        seconds,
        float(np.mean(predict(state, split.source_x) == split.source_y)),
    )


def compare_detection(cfg: RunConfig, seed: int) -> dict[str, RunSummary]:
    """Dual-space DSD against the single-space ablation on one seed.

    Both arms share the same pretrained state, so they differ only in how
    unknown candidates are flagged during adaptation. The ``"pretrain"`` entry
    summarizes that shared state before any adaptation.
    """
    cfg = cfg.with_seed(seed)
    split = generate(cfg.data)
    t0 = time.perf_counter()
    base_cfg = cfg.replace(train=dataclasses.replace(cfg.train, adapt_epochs=0))
    pre = train(base_cfg, split)
    t_pre = time.perf_counter() - t0
    out = {"pretrain": _summary("pretrain", seed, pre, split, t_pre)}
    for mode in ("dual", "single"):
        arm_cfg = cfg.replace(detect=dataclasses.replace(cfg.detect, mode=mode))
        t1 = time.perf_counter()
        state = train(arm_cfg, split, state=fork_state(pre, arm_cfg))
        out[mode] = _summary(mode, seed, state, split, t_pre + time.perf_counter() - t1)
    return out


def ablation_variants(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    """Named configurations spanning one ablation axis."""
    m = cfg.model
    moe = m.moe

    def with_moe(**kw) -> RunConfig:
        return cfg.replace(model=dataclasses.replace(m, moe=dataclasses.replace(moe, **kw)))

    if axis == "router":
        return [(k, with_moe(router_kind=k)) for k in ("graph_gat", "graph_gcn", "mhsa", "cosine")]
    if axis == "n_experts":
        return [(f"N={n}", with_moe(n_experts=n, top_k=min(moe.top_k, n))) for n in (4, 6, 8, 12)]
    if axis == "top_k":
        return [(f"K={k}", with_moe(top_k=k)) for k in (1, 2, 3, 4) if k <= moe.n_experts]
    if axis == "momentum":
        return [(f"m={v}", cfg.replace(train=dataclasses.replace(cfg.train, memory_momentum=v))) for v in (0.0, 0.9, 0.99, 0.999)]
    if axis == "gamma":
        return [(f"gamma={g:g}", cfg.replace(train=dataclasses.replace(cfg.train, gamma=g))) for g in (0.0, 1.0, 10.0, 100.0)]
    if axis == "placement":
        last = m.depth - 1
        early = (0, 1) if m.depth > 1 else (0,)
        return [
            ("default", cfg),
            ("last_layer", cfg.replace(model=dataclasses.replace(m, moe_layers=(last,), routing_layer=last))),
            ("early_routing", cfg.replace(model=dataclasses.replace(m, moe_layers=early, routing_layer=early[0]))),
        ]
    if axis == "detection":
        return [(mode, cfg.replace(detect=dataclasses.replace(cfg.detect, mode=mode))) for mode in ("dual", "single")]
    raise ValueError(f"unknown ablation axis {axis!r}; choose one of {', '.join(ABLATION_AXES)}")


def run_ablation(cfg: RunConfig, axis: str, split: DatasetSplit, seeds=(0,)) -> list[RunSummary]:
    """Train every variant of ``axis`` on a fixed dataset; the seed sets initialisation and batching."""
    rows = []
    for label, variant in ablation_variants(cfg, axis):
        for seed in seeds:
            vcfg = variant.replace(train=dataclasses.replace(variant.train, seed=seed))
            t0 = time.perf_counter()
            state = train(vcfg, split)
            rows.append(_summary(label, seed, state, split, time.perf_counter() - t0))
    return rows


__all__ = [
    "ABLATION_AXES",
    "RunSummary",
    "ablation_variants",
    "compare_detection",
    "fork_state",
    "run_ablation",
]
