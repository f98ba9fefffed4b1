"""Factor graph attention for visual-dialog answer retrieval, in numpy."""

from .config import GraphConfig, RunConfig, UtilitySpec, dialog_graph
from .core import ContractError, NonFiniteError
from .fga import FactorGraphParams, Utility, run_attention
from .model import FGAModel, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ContractError", "FGAModel", "FactorGraphParams", "GraphConfig", "NonFiniteError",
    "RunConfig", "Utility", "UtilitySpec", "dialog_graph", "load_checkpoint", "run_attention",
    "save_checkpoint",
]
