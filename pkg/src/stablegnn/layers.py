"""Graph layers with per-environment edge weight predictors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import Graph, MessageEdges

ATTENTION_SLOPE = 0.2

ACTIVATIONS = {
    "elu": ad.elu,
    "relu": lambda x: ad.leaky_relu(x, 0.0),
    "leaky_relu": lambda x: ad.leaky_relu(x, ATTENTION_SLOPE),
    "identity": ad.identity,
}


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class BackboneParams:
    """Shared transforms ``W_l``; the last one maps to class logits."""

    weights: list[Parameter]

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "BackboneParams":
        return cls([Parameter(glorot(rng, (dims[l], dims[l + 1])), name=f"W{l}") for l in range(len(dims) - 1)])

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Parameter]:
        return list(self.weights)

    def freeze(self):
        for w in self.weights:
            w.freeze()

    def unfreeze(self):
        for w in self.weights:
            w.unfreeze()


@dataclass
class WeightPredictor:
    """Per-layer vectors ``a_l`` of length ``2 * out_dim_l`` for one environment."""

    vectors: list[Parameter]
    env: int = 0
    mode: str = "softmax"

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator, env: int = 0, mode: str = "softmax") -> "WeightPredictor":
        if mode not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown weight mode {mode!r}")
        vecs = [Parameter(glorot(rng, (2 * d,)), name=f"a{env}_{l}") for l, d in enumerate(dims[1:])]
        return cls(vecs, env, mode)

    def parameters(self) -> list[Parameter]:
        return list(self.vectors)


@dataclass
class EdgeWeights:
    """Per-edge weights aligned with ``MessageEdges`` order."""

    alpha: Tensor
    mode: str = "softmax"
    detached: bool = False

    def detach(self) -> "EdgeWeights":
        return EdgeWeights(self.alpha.detach(), self.mode, True)

    @property
    def values(self) -> np.ndarray:
        return self.alpha.value


def _edges(graph) -> MessageEdges:
    return graph.message_edges if isinstance(graph, Graph) else graph


def edge_logits(h: Tensor, edges: MessageEdges, a: Tensor) -> Tensor:
    """``a . [h_i || h_j]`` for every edge (target i, source j)."""
    f = h.shape[1]
    if a.shape != (2 * f,):
        raise ValueError(f"weight vector must have length {2 * f}, got {a.shape}")
    score_dst = ad.matmul(h, ad.take(a, np.arange(f)))
    score_src = ad.matmul(h, ad.take(a, np.arange(f, 2 * f)))
    return ad.add(ad.take(score_dst, edges.dst), ad.take(score_src, edges.src))


def attention_edge_weights(h: Tensor, graph, a: Tensor) -> EdgeWeights:
    """Softmax over each target's neighbourhood of ``LeakyReLU(a . [h_i || h_j])``."""
    edges = _edges(graph)
    logits = ad.leaky_relu(edge_logits(h, edges, a), ATTENTION_SLOPE)
    return EdgeWeights(ad.segment_softmax(logits, edges.offsets), "softmax")


def sigmoid_edge_weights(h: Tensor, graph, a: Tensor) -> EdgeWeights:
    """Independent per-edge ``sigmoid(a . [h_i || h_j])``."""
    edges = _edges(graph)
    return EdgeWeights(ad.sigmoid(edge_logits(h, edges, a)), "sigmoid")


def weighted_aggregate(h: Tensor, graph, alpha: EdgeWeights | Tensor, activation="elu") -> Tensor:
    """``act(sum_j alpha_ij h_j)`` per target node."""
    edges = _edges(graph)
    w = alpha.alpha if isinstance(alpha, EdgeWeights) else alpha
    if w.shape != (edges.num_edges,):
        raise ValueError(f"expected {edges.num_edges} edge weights, got {w.shape}")
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    return act(ad.edge_aggregate(w, h, edges.src, edges.dst, edges.num_nodes))


def gcn_coefficients(graph) -> np.ndarray:
    """``1 / sqrt(d_i d_j)`` with self-loop-augmented degrees."""
    edges = _edges(graph)
    deg = edges.degree.astype(np.float64)
    return 1.0 / np.sqrt(deg[edges.dst] * deg[edges.src])


def gcn_layer(h: Tensor, graph, W: Tensor, activation="elu") -> Tensor:
    """Symmetric-normalised propagation of ``h W``."""
    coef = Tensor(gcn_coefficients(graph))
    return weighted_aggregate(ad.matmul(h, W), graph, coef, activation)


@dataclass
class ForwardConfig:
    activation: str = "elu"
    dropout: float = 0.6
    input_dropout: float = 0.1


@dataclass
class ForwardOutput:
    logits: Tensor
    alphas: list[EdgeWeights] = field(default_factory=list)


def forward_backbone(graph: Graph, env: int, params: BackboneParams, predictors: list[WeightPredictor],
                     training: bool = False, rng: np.random.Generator | None = None,
                     config: ForwardConfig | None = None, features: Tensor | None = None) -> ForwardOutput:
    """Run the re-weighted GNN for environment ``env``; returns logits and per-layer weights."""
    cfg = config or ForwardConfig()
    if env >= len(predictors):
        raise ValueError(f"no weight predictor for environment {env}")
    pred = predictors[env]
    x = features if features is not None else Tensor(graph.features)
    x = ad.dropout(x, cfg.input_dropout, rng, training)
    alphas = []
    n_layers = len(params.weights)
    for l, W in enumerate(params.weights):
        if l > 0:
            x = ad.dropout(x, cfg.dropout, rng, training)
        h = ad.matmul(x, W)
        if pred.mode == "softmax":
            alpha = attention_edge_weights(h, graph, pred.vectors[l])
        else:
            alpha = sigmoid_edge_weights(h, graph, pred.vectors[l])
        alphas.append(alpha)
        x = weighted_aggregate(h, graph, alpha, "identity" if l == n_layers - 1 else cfg.activation)
    return ForwardOutput(x, alphas)


def forward_gcn(graph: Graph, params: BackboneParams, training: bool = False,
                rng: np.random.Generator | None = None, config: ForwardConfig | None = None) -> ForwardOutput:
    cfg = config or ForwardConfig()
    x = ad.dropout(Tensor(graph.features), cfg.input_dropout, rng, training)
    n_layers = len(params.weights)
    for l, W in enumerate(params.weights):
        if l > 0:
            x = ad.dropout(x, cfg.dropout, rng, training)
        x = gcn_layer(x, graph, W, "identity" if l == n_layers - 1 else cfg.activation)
    return ForwardOutput(x)
