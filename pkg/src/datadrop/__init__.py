"""Influence-based training data dropout with two-round retraining."""
from . import backend
from .data import Dataset, PlantedTruth, load_csv, load_idx, split, synth_blobs
from .ihvp import IhvpConfig, IhvpResult, solve_cg, solve_lissa
from .influence import (InfluenceReport, InfluenceScore, influence_pair, s_vector,
                        score_all, select_unfavorable)
from .model import ModelSpec, Sample, grad, hvp, loss
from .pipeline import RoundCountSeries, TwoRoundResult, multi_round, two_round
from .trainer import Metrics, TrainConfig, evaluate, init_params, train

__version__ = "0.1.0"

__all__ = [
    "backend", "Dataset", "PlantedTruth", "load_csv", "load_idx", "split", "synth_blobs",
    "IhvpConfig", "IhvpResult", "solve_cg", "solve_lissa",
    "InfluenceReport", "InfluenceScore", "influence_pair", "s_vector", "score_all",
    "select_unfavorable", "ModelSpec", "Sample", "grad", "hvp", "loss",
    "RoundCountSeries", "TwoRoundResult", "multi_round", "two_round",
    "Metrics", "TrainConfig", "evaluate", "init_params", "train",
]
