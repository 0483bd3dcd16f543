"""N-best rescoring with MWER-trained LSTM language models attending to first-pass audio."""

from .estimators import NBestRescorer, XentLanguageModel
from .lm import LmConfig, RescoreModel, Vocabulary
from .rescore_eval import EvalReport, evaluate
from .simulator import SimConfig, generate_task
from .training import TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "LmConfig",
    "NBestRescorer",
    "RescoreModel",
    "SimConfig",
    "TrainConfig",
    "Vocabulary",
    "XentLanguageModel",
    "evaluate",
    "generate_task",
    "load_checkpoint",
    "save_checkpoint",
]
