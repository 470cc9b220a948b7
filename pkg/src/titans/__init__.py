"""Neural long-term memory sequence models with a chunk-parallel inner loop."""

from titans.config import RunConfig, TaskSpec, TitansConfig, TrainConfig
from titans.errors import (
    ConfigError,
    ContractError,
    InputError,
    NumericalError,
    ShapeError,
    UnsupportedOpError,
)
from titans.memory import GateSignals, MemoryState, ProjectionSet
from titans.model import TitansModel, load_checkpoint, model_forward, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "GateSignals", "InputError", "MemoryState",
    "NumericalError", "ProjectionSet", "RunConfig", "ShapeError", "TaskSpec",
    "TitansConfig", "TitansModel", "TrainConfig", "UnsupportedOpError",
    "load_checkpoint", "model_forward", "save_checkpoint",
]
