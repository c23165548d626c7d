"""Semi-supervised Bayesian binary CP decomposition with Polya-Gamma
augmentation and partial natural-gradient inference."""
from .evaluate import (ScoredEntities, precision_recall_at_n, roc_auc, score_supervised,
                       score_unsupervised)
from .inference import TrainingError, train
from .state import LabelSet, ModelState, PriorState, TrainConfig
from .synthetic import PlantConfig, desk_preset, generate
from .tensor import SparseBinaryTensor, load_tensor, sample_minibatch, save_tensor, validate

__version__ = "0.1.0"

__all__ = [
    "LabelSet", "ModelState", "PlantConfig", "PriorState", "ScoredEntities", "SparseBinaryTensor",
    "TrainConfig", "TrainingError", "desk_preset", "generate", "load_tensor", "precision_recall_at_n",
    "roc_auc", "sample_minibatch", "save_tensor", "score_supervised", "score_unsupervised", "train",
    "validate",
]
