"""Interface-aligned token-mixer replacement for small vision transformers.

Swap attention layers for bidirectional sequential mixers (LSTM or a
simplified selective state-space scan) behind an unchanged block interface,
distill them from a frozen teacher under shared halting masks, and analyze
token dependencies and runtime tradeoffs.
"""

from .data import Dataset, SyntheticSpec, load_dataset, make_synthetic
from .errors import (
    ConfigError,
    ContractError,
    DependencyError,
    FormatError,
    SeqswapError,
    ShapeError,
)
from .estimators import SparsityGuidedDistiller, TokenMixerClassifier
from .model import (
    Block,
    ForwardTrace,
    Model,
    ModelConfig,
    accuracy,
    classify,
    forward,
    init_model,
    named_parameters,
    parameter_count,
    replace_layers,
)
from .training import DistillConfig, train_classifier, train_distill

__version__ = "0.1.0"

__all__ = [
    "Block", "ConfigError", "ContractError", "Dataset", "DependencyError",
    "DistillConfig", "FormatError", "ForwardTrace", "Model", "ModelConfig",
    "SeqswapError", "ShapeError", "SparsityGuidedDistiller", "SyntheticSpec",
    "TokenMixerClassifier", "accuracy", "classify", "forward", "init_model",
    "load_dataset", "make_synthetic", "named_parameters", "parameter_count",
    "replace_layers", "train_classifier", "train_distill",
]
