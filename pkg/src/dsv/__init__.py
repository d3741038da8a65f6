"""Deep support vectors: DeepKKT extraction for trained classifiers, on a small
numpy autodiff engine."""
from .deepkkt import DsvSet, ExtractConfig, KktReport, check_kkt, select, synthesize
from .nn import Architecture, Model, init_model, load_checkpoint, save_checkpoint

__all__ = ["Architecture", "DsvSet", "ExtractConfig", "KktReport", "Model", "check_kkt",
           "init_model", "load_checkpoint", "save_checkpoint", "select", "synthesize"]
__version__ = "0.1.0"
