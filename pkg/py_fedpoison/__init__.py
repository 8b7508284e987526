"""py-fedpoison: label-flipping and feature-poisoning attacks on a FedAvg-trained MLP."""

from .attacks import AttackKind, AttackSpec, flip_labels, fp_poison
from .data import Dataset, SplitBundle, SyntheticSpec, gen_synthetic, load_csv, preprocess, split
from .event import Event
from .event_log import EventLog
from .federation import ExperimentOutcome, FederationConfig, fed_avg, run_experiment
from .importance import ForestConfig, permutation_importance, select_target_feature
from .metadata import Metadata
from .nn import Bau1Params, TrainConfig, init_params, predict, train_local
from .report import ExperimentRecord, SuccessRule, classify_success, export_csv, scenario_id
from .stream import StreamName

try:
    from ._version import version as __version__
except ImportError:
    __version__ = "unknown"

__all__ = [
    "AttackKind",
    "AttackSpec",
    "Bau1Params",
    "Dataset",
    "Event",
    "EventLog",
    "ExperimentOutcome",
    "ExperimentRecord",
    "FederationConfig",
    "ForestConfig",
    "Metadata",
    "SplitBundle",
    "StreamName",
    "SuccessRule",
    "SyntheticSpec",
    "TrainConfig",
    "__version__",
    "classify_success",
    "export_csv",
    "fed_avg",
    "flip_labels",
    "fp_poison",
    "gen_synthetic",
    "init_params",
    "load_csv",
    "permutation_importance",
    "predict",
    "preprocess",
    "run_experiment",
    "scenario_id",
    "select_target_feature",
    "split",
    "train_local",
]
