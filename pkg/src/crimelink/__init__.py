"""Crime linkage with Siamese autoencoders on sparse binary case data."""

__version__ = "0.1.0"

from .dataset import CaseTable, FeatureSchema, load_cases, save_cases
from .estimators import LogisticPairLinker, SiameseLinker
from .evaluation import cross_validate, metric_suite, score_all_pairs
from .mapping import MappingSpec, apply_mapping, parse_mapping
from .network import NetConfig, load_params, save_params
from .synthgen import GenConfig, generate
from .training import LossConfig, TrainConfig

__all__ = [
    "CaseTable",
    "FeatureSchema",
    "GenConfig",
    "LogisticPairLinker",
    "LossConfig",
    "MappingSpec",
    "NetConfig",
    "SiameseLinker",
    "TrainConfig",
    "apply_mapping",
    "cross_validate",
    "generate",
    "load_cases",
    "load_params",
    "metric_suite",
    "parse_mapping",
    "save_cases",
    "save_params",
    "score_all_pairs",
]
