"""Desk-scale simulator of federated CSI feedback with LoRA-adapted shared decoders."""

from .config import ExperimentConfig, parse_config
from .csi import ChannelConfig, Dataset, build_dataset, nmse, nmse_db
from .federation import FedHyper, Strategy, run_federation
from .experiment import run_experiment, sweep

__all__ = [
    "ChannelConfig",
    "Dataset",
    "ExperimentConfig",
    "FedHyper",
    "Strategy",
    "build_dataset",
    "nmse",
    "nmse_db",
    "parse_config",
    "run_experiment",
    "run_federation",
    "sweep",
]

__version__ = "0.1.0"
