"""Deterministic federated-learning simulator with pseudo-data augmentation."""

from .algorithms import AlgorithmSpec, ClientContext, LocalResult
from .config import RunConfig, parse_config
from .data import LabeledDataset, PartitionSpec, PseudoDataset
from .engine import evaluate_global, run_round, run_simulation
from .metrics import RoundMetrics, RunReport
from .nn import DenseNet, GradientSet, ModelParams
from .probe import ProbeReport, run_probe

__version__ = "0.1.0"

__all__ = [
    "AlgorithmSpec",
    "ClientContext",
    "DenseNet",
    "GradientSet",
    "LabeledDataset",
    "LocalResult",
    "ModelParams",
    "PartitionSpec",
    "ProbeReport",
    "PseudoDataset",
    "RoundMetrics",
    "RunConfig",
    "RunReport",
    "evaluate_global",
    "parse_config",
    "run_probe",
    "run_round",
    "run_simulation",
]
