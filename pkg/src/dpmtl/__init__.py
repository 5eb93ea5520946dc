"""Dichotomous-polytomous multi-task learning for student response data."""

from .data import Dataset, Interaction, OptionPrediction, correctness_label, validate_dataset
from .ingestion import SplitSpec, SplitUnit, load_dataset, split_dataset
from .loss import batch_loss, dp_loss
from .metrics import PAPER_LAMBDAS, RankTable, rank_average, roc_auc
from .models import DpBidkt, DpIrt, DpNmf, build_model, load_model, option_probabilities
from .score_prediction import fit_isotonic, fit_linear, predict_score, sp_evaluate
from .synthgen import GenConfig, bayes_optimal_metrics, generate_dataset
from .training import TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Interaction", "OptionPrediction", "correctness_label", "validate_dataset",
    "SplitSpec", "SplitUnit", "load_dataset", "split_dataset",
    "batch_loss", "dp_loss",
    "PAPER_LAMBDAS", "RankTable", "rank_average", "roc_auc",
    "DpBidkt", "DpIrt", "DpNmf", "build_model", "load_model", "option_probabilities",
    "fit_isotonic", "fit_linear", "predict_score", "sp_evaluate",
    "GenConfig", "bayes_optimal_metrics", "generate_dataset",
    "TrainConfig", "adam_step", "evaluate", "train",
]
