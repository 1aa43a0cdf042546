"""Dual-space unknown detection for open-set domain adaptation.

A small patch transformer whose feed-forward blocks can be Graph-Router
Mixture-of-Experts layers. Target samples whose nearest known prototype
differs between the image-feature space and the routing-feature space are
treated as unknown candidates, clustered, and turned into unknown prototypes.
"""
from .config import ConfigError, DetectConfig, RunConfig, TrainConfig, load_config, parse_config
from .data import DatasetSplit, SyntheticConfig, generate
from .encoder import EncoderConfig
from .grmoe import MoEConfig
from .pipeline import Metrics, TrainState, evaluate, infer, load_state, pretrain_source, save_state, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetSplit",
    "DetectConfig",
    "EncoderConfig",
    "Metrics",
    "MoEConfig",
    "RunConfig",
    "SyntheticConfig",
    "TrainConfig",
    "TrainState",
    "evaluate",
    "generate",
    "infer",
    "load_config",
    "load_state",
    "parse_config",
    "pretrain_source",
    "save_state",
    "train",
]
