"""scikit-learn style estimators around the training loops.

The graph plays the role of ``X``; the second ``fit`` argument selects the
training nodes (or users) instead of carrying targets, because labels live on
the graph itself.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .environments import BiasSpec, EnvironmentSet, build_environments
from .graph import BipartiteGraph, Graph
from .metrics import RankingResult, accuracy, ndcg_at_n
from .recommender import (Interactions, RecConfig, recommend_topn, train_ngcf,
                          train_stable_recommender)
from .training import TrainConfig, predict_logits, train_baseline, train_stable
from .validation import check_bipartite, check_graph, check_is_fitted, check_node_mask


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _NodeClassifierMixin(ClassifierMixin):
    def decision_function(self, graph: Graph) -> np.ndarray:
        """Raw class logits for every node."""
        check_is_fitted(self)
        check_graph(graph)
        if graph.features.shape[1] != self.n_features_in_:
            raise ValueError(f"graph has {graph.features.shape[1]} features, model expects {self.n_features_in_}")
        return predict_logits(graph, self.result_, self._config())

    def predict_proba(self, graph: Graph) -> np.ndarray:
        return _softmax(self.decision_function(graph))

    def predict(self, graph: Graph) -> np.ndarray:
        scores = self.decision_function(graph)
        return self.classes_[np.argmax(scores, axis=1)]

    def score(self, graph: Graph, nodes=None, sample_weight=None) -> float:
        """Accuracy on ``nodes`` against the graph's own labels."""
        mask = check_node_mask(nodes, graph.num_nodes)
        return accuracy(self.decision_function(graph), graph.labels, mask)

    @property
    def training_log_(self):
        check_is_fitted(self)
        return self.result_.log


class StableGNNClassifier(_NodeClassifierMixin, BaseEstimator):
    """Node classifier trained with locally and globally stable regularization.

    Parameters
    ----------
    lambda0, lambda1
        Weights of the local (edge-weight agreement) and global (sub-loss gap) terms.
    k_envs
        Number of generated environments; they alternate ``env_tau`` and ``1 - env_tau``.
    env_bias
        Selection factor for generated environments: ``"label"``, ``"label:T"`` or
        ``"attr:NAME=VALUE"``.
    weight_mode
        ``"softmax"`` (attention) or ``"sigmoid"`` (absolute importance).
    """

    def __init__(self, lambda0=1.0, lambda1=1.0, k_envs=2, env_bias="label", env_tau=0.8, hidden=64,
                 layers=2, lr=0.005, weight_decay=0.0, epochs=200, inner_steps=1, dropout=0.6,
                 input_dropout=0.1, weight_mode="softmax", activation="elu", random_state=0):
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.k_envs = k_envs
        self.env_bias = env_bias
        self.env_tau = env_tau
        self.hidden = hidden
        self.layers = layers
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.inner_steps = inner_steps
        self.dropout = dropout
        self.input_dropout = input_dropout
        self.weight_mode = weight_mode
        self.activation = activation
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(lambda0=self.lambda0, lambda1=self.lambda1, lr=self.lr, weight_decay=self.weight_decay,
                           epochs=self.epochs, inner_steps=self.inner_steps, hidden=self.hidden,
                           layers=self.layers, dropout=self.dropout, input_dropout=self.input_dropout,
                           activation=self.activation, weight_mode=self.weight_mode,
                           seed=int(self.random_state or 0))

    def fit(self, graph: Graph, train_nodes=None, environments: EnvironmentSet | None = None, callback=None):
        """Train on ``train_nodes`` (mask or indices); environments are generated unless given."""
        check_graph(graph)
        if environments is None:
            mask = check_node_mask(train_nodes, graph.num_nodes, "train_nodes")
            spec = BiasSpec.parse(self.env_bias, self.env_tau, seed=int(self.random_state or 0))
            environments = build_environments(graph, mask, spec, self.k_envs)
        self.environments_ = environments
        self.result_ = train_stable(graph, environments, self._config(), callback=callback)
        self.classes_ = np.arange(graph.num_classes)
        self.n_features_in_ = graph.features.shape[1]
        return self


class GNNClassifier(_NodeClassifierMixin, BaseEstimator):
    """Plain GAT or GCN node classifier trained on a single environment."""

    def __init__(self, model="gat", hidden=64, layers=2, lr=0.005, weight_decay=0.0, epochs=200, dropout=0.6,
                 input_dropout=0.1, weight_mode="softmax", activation="elu", random_state=0):
        self.model = model
        self.hidden = hidden
        self.layers = layers
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.dropout = dropout
        self.input_dropout = input_dropout
        self.weight_mode = weight_mode
        self.activation = activation
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(lambda0=0.0, lambda1=0.0, lr=self.lr, weight_decay=self.weight_decay,
                           epochs=self.epochs, hidden=self.hidden, layers=self.layers, dropout=self.dropout,
                           input_dropout=self.input_dropout, activation=self.activation,
                           weight_mode=self.weight_mode, seed=int(self.random_state or 0))

    def fit(self, graph: Graph, train_nodes=None, callback=None):
        check_graph(graph)
        mask = check_node_mask(train_nodes, graph.num_nodes, "train_nodes")
        self.result_ = train_baseline(graph, mask, self._config(), self.model, callback=callback)
        self.classes_ = np.arange(graph.num_classes)
        self.n_features_in_ = graph.features.shape[1]
        return self


class _RecommenderMixin:
    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Final user and item representations."""
        check_is_fitted(self)
        if not hasattr(self, "_emb"):
            self._emb = self.result_.embeddings()
        return self._emb

    def recommend(self, users=None, n: int = 100, exclude_train: bool = True) -> RankingResult:
        ue, ie = self.embeddings()
        exclude = self.train_items_ if exclude_train else None
        return recommend_topn(ue, ie, exclude, n, users)

    def score(self, held_out: BipartiteGraph, users=None, n: int = 100) -> float:
        """NDCG@n of held-out interactions for ``users`` (default: everyone with any)."""
        relevance = held_out.user_items()
        if users is None:
            users = [u for u, r in enumerate(relevance) if r]
        ranking = self.recommend(users, n)
        ranking.relevance = {int(u): relevance[int(u)] for u in users}
        return ndcg_at_n(ranking, n)

    def _prepare(self, interactions: BipartiteGraph):
        check_bipartite(interactions)
        self.graph_ = Interactions.from_bipartite(interactions)
        self.train_items_ = interactions.user_items()
        self.__dict__.pop("_emb", None)


class StableGraphRecommender(_RecommenderMixin, BaseEstimator):
    """Bipartite propagation recommender with per-environment sigmoid gates and stability terms.

    ``fit`` takes the training interaction log; ``train_users`` restricts which
    users' interactions enter the BPR loss while the full log defines the graph.
    """

    def __init__(self, dim=64, layers=3, lambda0=1.0, lambda1=1.0, k_envs=2, env_bias="attr:gender=M",
                 env_tau=0.6, lr=0.01, weight_decay=0.0, epochs=120, inner_steps=1, concat_layers=True,
                 random_state=0):
        self.dim = dim
        self.layers = layers
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.k_envs = k_envs
        self.env_bias = env_bias
        self.env_tau = env_tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.inner_steps = inner_steps
        self.concat_layers = concat_layers
        self.random_state = random_state

    def _config(self) -> RecConfig:
        return RecConfig(dim=self.dim, layers=self.layers, lr=self.lr, epochs=self.epochs,
                         inner_steps=self.inner_steps, lambda0=self.lambda0, lambda1=self.lambda1,
                         weight_decay=self.weight_decay, concat_layers=self.concat_layers,
                         seed=int(self.random_state or 0))

    def fit(self, interactions: BipartiteGraph, train_users=None, environments: EnvironmentSet | None = None,
            callback=None):
        self._prepare(interactions)
        if environments is None:
            mask = check_node_mask(train_users, interactions.num_users, "train_users")
            spec = BiasSpec.parse(self.env_bias, self.env_tau, seed=int(self.random_state or 0))
            environments = build_environments(interactions, mask, spec, self.k_envs)
        self.environments_ = environments
        self.result_ = train_stable_recommender(self.graph_, environments, self._config(), callback=callback)
        return self

    @property
    def training_log_(self):
        check_is_fitted(self)
        return self.result_.log


class NGCFRecommender(_RecommenderMixin, BaseEstimator):
    """Unregularized propagation recommender; ``gated=False`` drops the learned edge gate."""

    def __init__(self, dim=64, layers=3, gated=True, lr=0.01, weight_decay=0.0, epochs=120, concat_layers=True,
                 random_state=0):
        self.dim = dim
        self.layers = layers
        self.gated = gated
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.concat_layers = concat_layers
        self.random_state = random_state

    def _config(self) -> RecConfig:
        return RecConfig(dim=self.dim, layers=self.layers, lr=self.lr, epochs=self.epochs, lambda0=0.0,
                         lambda1=0.0, weight_decay=self.weight_decay, concat_layers=self.concat_layers,
                         seed=int(self.random_state or 0))

    def fit(self, interactions: BipartiteGraph, train_users=None, callback=None):
        self._prepare(interactions)
        mask = check_node_mask(train_users, interactions.num_users, "train_users")
        self.result_ = train_ngcf(self.graph_, mask, self._config(), gated=self.gated, callback=callback)
        return self

    @property
    def training_log_(self):
        check_is_fitted(self)
        return self.result_.log
