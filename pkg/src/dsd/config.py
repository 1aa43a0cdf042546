"""Run configuration: sectioned ``key = value`` text with ``#`` comments.

Sections are ``[data]``, ``[model]``, ``[train]`` and ``[detect]``. Every key
is optional; missing keys take the defaults of the dataclasses below.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig
from .encoder import EncoderConfig
from .grmoe import MoEConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 50
    adapt_epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    pretrain_lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-3
    balance_clip: float = 0.1  # cap on the global L2 norm of the weighted balance gradient; 0 disables
    memory_momentum: float = 0.99
    gamma: float = 100.0
    source_label_override: bool = True
    seed: int = 0


@dataclass(frozen=True)
class DetectConfig:
    mode: str = "dual"  # "dual" or "single" (image space only, farthest quantile)
    kmeans_restarts: int = 10
    single_quantile: float = 0.25


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        m = self.model
        return {
            "data": self.data.to_dict(),
            "model": {
                "image_shape": list(m.image_shape),
                "patch_size": m.patch_size,
                "depth": m.depth,
                "n_heads": m.n_heads,
                "moe_layers": list(m.moe_layers),
                "routing_layer": m.routing_layer,
                "input_norm": m.input_norm,
                **dataclasses.asdict(m.moe),
            },
            "train": dataclasses.asdict(self.train),
            "detect": dataclasses.asdict(self.detect),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        md = dict(d["model"])
        moe_keys = {f.name for f in dataclasses.fields(MoEConfig)}
        moe = MoEConfig(**{k: md.pop(k) for k in list(md) if k in moe_keys})
        model = EncoderConfig(
            image_shape=tuple(md["image_shape"]),
            patch_size=md["patch_size"],
            depth=md["depth"],
            n_heads=md["n_heads"],
            moe_layers=tuple(md["moe_layers"]),
            routing_layer=md["routing_layer"],
            input_norm=md.get("input_norm", True),
            moe=moe,
        )
        return cls(
            data=SyntheticConfig.from_dict(d["data"]),
            model=model,
            train=TrainConfig(**d["train"]),
            detect=DetectConfig(**d["detect"]),
        )

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.replace(
            data=dataclasses.replace(self.data, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def validate(cfg: RunConfig) -> None:
    m, t = cfg.model, cfg.train
    if tuple(cfg.data.image_shape) != tuple(m.image_shape):
        raise ConfigError(f"model.image_shape {m.image_shape} does not match data image shape {cfg.data.image_shape}")
    if cfg.data.patch_size != m.patch_size:
        raise ConfigError("model.patch_size must equal data.patch_size")
    if not 0.0 <= t.memory_momentum <= 1.0:
        raise ConfigError(f"train.memory_momentum must lie in [0, 1], got {t.memory_momentum}")
    if t.gamma < 0:
        raise ConfigError(f"train.gamma must be >= 0, got {t.gamma}")
    if t.balance_clip < 0:
        raise ConfigError(f"train.balance_clip must be >= 0, got {t.balance_clip}")
    if t.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if t.pretrain_epochs < 0 or t.adapt_epochs < 0:
        raise ConfigError("epoch counts must be >= 0")
    if cfg.detect.mode not in ("dual", "single"):
        raise ConfigError(f"detect.mode must be 'dual' or 'single', got {cfg.detect.mode!r}")
    if not 0.0 < cfg.detect.single_quantile <= 1.0:
        raise ConfigError("detect.single_quantile must lie in (0, 1]")


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "depth": int,
    "patch_size": int,
    "n_heads": int,
    "moe_layers": "ints",
    "routing_layer": int,
    "input_norm": bool,
    "token_dim": int,
    "routing_dim": int,
    "n_experts": int,
    "top_k": int,
    "router_kind": str,
    "noise_std": float,
    "cosine_tau": float,
    "cosine_norm": str,
}


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind == "ints":
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(tuple(p.strip() for p in grp.split("+")) for grp in raw.split(";") if grp.strip())
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in dataclasses.fields(cls)}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    unknown = set(parser.sections()) - {"data", "model", "train", "detect"}
    if unknown:
        raise ConfigError(f"unknown config section [{sorted(unknown)[0]}]")

    def section(name, cls, types):
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in types:
                    raise ConfigError(f"{name}.{key}: unknown key")
                values[key] = _coerce(name, key, raw, types[key])
        return values

    data_kw = section("data", SyntheticConfig, _field_types(SyntheticConfig))
    model_kw = section("model", None, _MODEL_KEYS)
    train_kw = section("train", TrainConfig, _field_types(TrainConfig))
    detect_kw = section("detect", DetectConfig, _field_types(DetectConfig))
    try:
        data = SyntheticConfig(**data_kw)
        moe_kw = {k: model_kw.pop(k) for k in list(model_kw) if k in {f.name for f in dataclasses.fields(MoEConfig)}}
        moe = MoEConfig(**moe_kw)
        model_kw.setdefault("patch_size", data.patch_size)
        model = EncoderConfig(image_shape=data.image_shape, moe=moe, **model_kw)
        return RunConfig(data, model, TrainConfig(**train_kw), DetectConfig(**detect_kw))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for name in ("data", "model", "train", "detect"):
        lines.append(f"[{name}]")
        for k, v in d[name].items():
            if name == "model" and k == "image_shape":
                continue
            if k == "templates":
                v = ";".join("+".join(t) for t in v)
            elif isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
