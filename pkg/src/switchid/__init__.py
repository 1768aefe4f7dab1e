from importlib.metadata import PackageNotFoundError, version

from switchid.dataset import read_dataset, validate_dataset
from switchid.em import run, run_restarts, update_transition
from switchid.metrics import bfr, evaluate, mode_match, mse
from switchid.model import SwitchingModel, TransitionMatrix
from switchid.model_format import load_model, save_model
from switchid.modes import exhaustive_estimate, moving_window_estimate
from switchid.simulate import BenchmarkSpec, simulate_benchmark

try:
    # Change here if project is renamed and does not equal the package name
    dist_name = __name__
    __version__ = version(dist_name)
except PackageNotFoundError:  # pragma: no cover
    __version__ = "unknown"
finally:
    del version, PackageNotFoundError

__all__ = [
    "BenchmarkSpec",
    "SwitchingModel",
    "TransitionMatrix",
    "bfr",
    "evaluate",
    "exhaustive_estimate",
    "load_model",
    "mode_match",
    "moving_window_estimate",
    "mse",
    "read_dataset",
    "run",
    "run_restarts",
    "save_model",
    "simulate_benchmark",
    "update_transition",
    "validate_dataset",
]
