"""Multi-round LoRA mixture-of-experts layers with a recurrent virtual node."""

__version__ = "0.1.0"

from .autograd import Tape, Tensor
from .config import GraphMoeConfig, RunConfig, TaskConfig, TrainConfig, load_config
from .model import ModelState, init_model, model_forward, parameter_census
from .routing import RoutingLedger, load_balance_loss, route, workload_stats
from .training import evaluate, total_loss, train

__all__ = [
    "GraphMoeConfig",
    "ModelState",
    "RoutingLedger",
    "RunConfig",
    "TaskConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "init_model",
    "load_balance_loss",
    "load_config",
    "model_forward",
    "parameter_census",
    "route",
    "total_loss",
    "train",
    "workload_stats",
]
