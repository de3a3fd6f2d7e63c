import logging

from .__version__ import __author__, __version__
from .api import ablate, evaluate_checkpoint, generate, load_dataset, train_model
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import configure
from .data import CompositionalDataset, LabelSpace, VocabSpec, World
from .evaluate import EvalReport, evaluate
from .model import EncoderConfig, ModelParams, initialize_model
from .train import TrainConfig, train

__all__ = [
    "__version__",
    "__author__",
    "configure",
    "generate",
    "load_dataset",
    "train_model",
    "evaluate_checkpoint",
    "ablate",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "CompositionalDataset",
    "LabelSpace",
    "VocabSpec",
    "World",
    "EvalReport",
    "evaluate",
    "EncoderConfig",
    "ModelParams",
    "initialize_model",
    "TrainConfig",
    "train",
]

logging.getLogger("caila").addHandler(logging.NullHandler())
