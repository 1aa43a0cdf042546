"""Command-line entry point: ``dsd generate | train | eval | ablate``.

Set ``DSD_LOG_LEVEL`` to ``error``, ``info`` (default) or ``debug``.
Every command exits 0 on success and 1 with a one-line diagnostic on error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import data as datamod
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import SyntheticConfig
from .encoder import encode_arrays
from .experiment import ABLATION_AXES, run_ablation
from .pipeline import (
    evaluate,
    load_state,
    predict,
    save_state,
    train,
    write_csv,
    write_training_log,
)

log = logging.getLogger("dsd")

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "training_log.csv"
METRICS_COLUMNS = ["os_star", "unk", "hos", "n_target"]
ABLATION_COLUMNS = ["axis", "variant", "seed", "os_star", "unk", "hos", "incon_precision", "importance_cv", "seconds"]


class CliError(Exception):
    """User-facing failure reported as a single line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _setup_logging() -> None:
    level = os.environ.get("DSD_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"DSD_LOG_LEVEL must be one of error, info, debug; got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _dataset_config(split) -> SyntheticConfig:
    meta = {k: v for k, v in split.config.items() if k != "class_templates"}
    return SyntheticConfig.from_dict(meta)


def _run_config(args, split=None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif split is not None:
        cfg = RunConfig(data=_dataset_config(split))
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, adapt_epochs=args.epochs))
    if getattr(args, "pretrain_epochs", None) is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, pretrain_epochs=args.pretrain_epochs))
    return cfg


def _load_dataset(path):
    if not Path(path).exists():
        raise CliError(f"dataset not found: {path}")
    return datamod.load(path)


def _check_shapes(cfg: RunConfig, split) -> None:
    shape = split.source_x.shape[1:] if split.n_source else split.target_x.shape[1:]
    if tuple(shape) != tuple(cfg.model.image_shape):
        raise CliError(f"dataset images have shape {tuple(shape)} but the model expects {cfg.model.image_shape}")
    if split.n_known != cfg.data.n_known:
        raise CliError(f"dataset has {split.n_known} known classes but the config says {cfg.data.n_known}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    data_cfg = cfg.data if args.seed is None else dataclasses.replace(cfg.data, seed=args.seed)
    split = datamod.generate(data_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datamod.save(split, out)
    if args.manifest:
        datamod.export_manifest(split, args.manifest)
    log.info("wrote %d source and %d target samples to %s", split.n_source, split.n_target, out)
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    if args.resume:
        state = load_state(args.resume)
        cfg = state.config
        if args.epochs is not None or args.pretrain_epochs is not None:
            cfg = state.config.replace(train=dataclasses.replace(state.config.train, **_epoch_overrides(args)))
            state.config = cfg
        split = _load_dataset(args.dataset) if args.dataset else datamod.generate(cfg.data)
    else:
        split = _load_dataset(args.dataset) if args.dataset else None
        cfg = _run_config(args, split)
        if split is None:
            split = datamod.generate(cfg.data)
        state = None
    _check_shapes(cfg, split)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")

    def on_epoch(st):
        save_state(st, ckpt)
        write_training_log(st.history, out / LOG_NAME, st.config)

    state = train(cfg, split, state=state, on_epoch=on_epoch)
    save_state(state, ckpt)
    write_training_log(state.history, out / LOG_NAME, cfg)
    met = evaluate(state, split)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, [{**met._asdict(), "n_target": split.n_target}], cfg)
    print(f"OS*={met.os_star:.4f} UNK={met.unk:.4f} HOS={met.hos:.4f}")
    return 0


def _epoch_overrides(args) -> dict:
    kw = {}
    if args.epochs is not None:
        kw["adapt_epochs"] = args.epochs
    if args.pretrain_epochs is not None:
        kw["pretrain_epochs"] = args.pretrain_epochs
    return kw


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    state = load_state(args.checkpoint)
    if not state.memories_ready:
        raise CliError("checkpoint holds no prototype memories; finish pretraining first")
    split = _load_dataset(args.dataset)
    _check_shapes(state.config, split)
    met = evaluate(state, split)
    print(f"OS*={met.os_star:.4f} UNK={met.unk:.4f} HOS={met.hos:.4f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, [{**met._asdict(), "n_target": split.n_target}], state.config)
    if args.dump_embeddings:
        _dump_embeddings(state, split, out / "embeddings.csv")
    return 0


def _dump_embeddings(state, split, path: Path) -> None:
    """One row per sample: domain, index, visible label, prediction, then f and r components."""
    cfg = state.config.model
    rows = []
    for domain, x in (("source", split.source_x), ("target", split.target_x)):
        if len(x) == 0:
            continue
        f, r = encode_arrays(x, cfg, state.params)
        pred = predict(state, x)
        for i in range(len(x)):
            row = {"domain": domain, "index": i, "label": int(split.source_y[i]) if domain == "source" else "", "pred": int(pred[i])}
            row.update({f"f{j}": float(v) for j, v in enumerate(f[i])})
            row.update({f"r{j}": float(v) for j, v in enumerate(r[i])})
            rows.append(row)
    cols = ["domain", "index", "label", "pred"] + [f"f{j}" for j in range(cfg.token_dim)] + [f"r{j}" for j in range(cfg.routing_dim)]
    write_csv(path, cols, rows, state.config)


def cmd_ablate(args) -> int:
    split = _load_dataset(args.dataset)
    cfg = _run_config(args, split)
    _check_shapes(cfg, split)
    seeds = [cfg.train.seed + i for i in range(args.n_seeds)]
    try:
        results = run_ablation(cfg, args.axis, split, seeds)
    except ValueError as exc:
        if "axis" in str(exc):
            raise CliError(str(exc)) from None
        raise
    rows = [
        {
            "axis": args.axis,
            "variant": s.label,
            "seed": s.seed,
            "os_star": s.metrics.os_star,
            "unk": s.metrics.unk,
            "hos": s.metrics.hos,
            "incon_precision": s.incon_precision,
            "importance_cv": ";".join(repr(v) for v in s.importance_cv),
            "seconds": s.seconds,
        }
        for s in results
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv(out / f"ablation_{args.axis}.csv", ABLATION_COLUMNS, rows, cfg)
    for row in rows:
        print(f"{row['variant']:>14s} seed={row['seed']} HOS={row['hos']:.4f}")
    log.info("wrote %s", path)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsd", description="Dual-space unknown detection for open-set domain adaptation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic two-domain dataset")
    g.add_argument("--config", help="run configuration file ([data] section is used)")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--seed", type=int, help="override the data seed")
    g.add_argument("--manifest", help="also write a CSV manifest (index, domain, visible label)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="pretrain on source, adapt to target, checkpoint and log")
    t.add_argument("--config", help="run configuration file")
    t.add_argument("--dataset", help="dataset file (generated from the config when omitted)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="override data and training seeds")
    t.add_argument("--epochs", type=int, help="override the number of adaptation epochs")
    t.add_argument("--pretrain-epochs", type=int, help="override the number of pretraining epochs")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", help="output directory (defaults to the checkpoint's directory)")
    e.add_argument("--dump-embeddings", action="store_true", help="write per-sample f and r vectors to embeddings.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one design axis and write a comparison CSV")
    a.add_argument("--config", help="run configuration file")
    a.add_argument("--dataset", required=True)
    a.add_argument("--axis", required=True, help="one of " + ", ".join(ABLATION_AXES))
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--seed", type=int, help="first training seed")
    a.add_argument("--n-seeds", type=int, default=1, help="seeds per variant")
    a.add_argument("--epochs", type=int, help="override the number of adaptation epochs")
    a.add_argument("--pretrain-epochs", type=int, help="override the number of pretraining epochs")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CliError, ConfigError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dsd: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
