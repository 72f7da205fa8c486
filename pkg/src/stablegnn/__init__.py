"""Stable prediction for graph neural networks under selection bias."""

from .environments import (BiasSpec, EnvironmentSet, biased_select, biased_select_by_attribute,
                           biased_select_by_label, build_environments, make_test_environments, split_nodes)
from .estimators import GNNClassifier, NGCFRecommender, StableGNNClassifier, StableGraphRecommender
from .experiment import ExperimentConfig, evaluate_sweep, run_experiment
from .graph import (BipartiteGraph, Graph, GraphFormatError, generate_synthetic, generate_synthetic_bipartite,
                    load_graph, load_interactions)
from .metrics import RankingResult, ScoreReport, accuracy, average_score, ndcg_at_n, stability_error
from .recommender import RecConfig, train_ngcf, train_stable_recommender
from .training import TrainConfig, train_baseline, train_stable

__version__ = "0.1.0"

__all__ = [
    "BiasSpec", "BipartiteGraph", "EnvironmentSet", "ExperimentConfig", "GNNClassifier", "Graph",
    "GraphFormatError", "NGCFRecommender", "RankingResult", "RecConfig", "ScoreReport", "StableGNNClassifier",
    "StableGraphRecommender", "TrainConfig", "accuracy", "average_score", "biased_select",
    "biased_select_by_attribute", "biased_select_by_label", "build_environments", "evaluate_sweep",
    "generate_synthetic", "generate_synthetic_bipartite", "load_graph", "load_interactions",
    "make_test_environments", "ndcg_at_n", "run_experiment", "split_nodes", "stability_error", "train_baseline",
    "train_ngcf", "train_stable", "train_stable_recommender",
]
