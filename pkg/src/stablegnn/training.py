"""Local/global stability regularizers and the alternating training loop."""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .environments import EnvironmentSet
from .graph import Graph
from .layers import BackboneParams, EdgeWeights, ForwardConfig, WeightPredictor, forward_backbone, forward_gcn

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyper-parameters shared by the stable and baseline trainers."""

    lambda0: float = 1.0
    lambda1: float = 1.0
    lr: float = 0.005
    inner_lr: float | None = None
    weight_decay: float = 0.0
    epochs: int = 200
    inner_steps: int = 1
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.6
    input_dropout: float = 0.1
    activation: str = "elu"
    weight_mode: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("lambda0 and lambda1 must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be non-negative")
        for name in ("dropout", "input_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")

    def dims(self, in_dim: int, num_classes: int) -> list[int]:
        return [in_dim] + [self.hidden] * (self.layers - 1) + [num_classes]

    @property
    def forward_config(self) -> ForwardConfig:
        return ForwardConfig(self.activation, self.dropout, self.input_dropout)


@dataclass
class LossBreakdown:
    epoch: int
    pred: float
    local: float
    global_: float
    total: float
    per_env_sublosses: list[float] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["global"] = rec.pop("global_")
        return rec

    @property
    def max_gap(self) -> float:
        s = self.per_env_sublosses
        return max(s) - min(s) if s else 0.0


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- regularizers


def local_regularizer(alpha0: list[EdgeWeights | Tensor], cached: list[list[EdgeWeights | Tensor]],
                      normalize: bool = True) -> Tensor:
    """Squared distance between observational weights and each cached environment's weights.

    ``alpha0[l]`` carries gradient; ``cached[e][l]`` is treated as a constant.
    Summed over layers, edges and environments, then divided by
    ``num_edges * K * num_layers`` when ``normalize``.
    """
    if not cached:
        return Tensor(0.0)
    terms = []
    count = 0
    for env_alphas in cached:
        if len(env_alphas) != len(alpha0):
            raise ValueError("layer count differs between environments")
        for a0, ae in zip(alpha0, env_alphas):
            a0 = a0.alpha if isinstance(a0, EdgeWeights) else a0
            ae = ae.alpha if isinstance(ae, EdgeWeights) else ae
            if a0.shape != ae.shape:
                raise ValueError(f"edge-set mismatch: {a0.shape} vs {ae.shape}")
            terms.append(ad.sum(ad.square(ad.sub(a0, ae.detach()))))
            count += a0.value.size
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    if normalize and count:
        total = ad.scale(total, 1.0 / count)
    return total


def env_subloss(per_node_losses: Tensor, env_labeled_sets: list[np.ndarray]) -> Tensor:
    """Mean of the observational per-node losses restricted to each environment's labeled set."""
    subs = []
    for e, idx in enumerate(env_labeled_sets):
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        if idx.size == 0:
            raise ValueError(f"environment {e} has no labeled nodes")
        subs.append(ad.mean(ad.take(per_node_losses, idx)))
    return ad.stack(subs)


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


def global_regularizer(sublosses: Tensor) -> Tensor:
    """Sum over unordered environment pairs of the squared sub-loss gap."""
    n = sublosses.shape[0]
    if n < 2:
        warnings.warn("global regularizer needs at least two environments; returning 0", stacklevel=2)
        return Tensor(0.0)
    i, j = _pairs(n)
    return ad.sum(ad.square(ad.sub(ad.take(sublosses, i), ad.take(sublosses, j))))


def pairwise_gap_sum(losses) -> float:
    """Plain-float version of :func:`global_regularizer`."""
    v = np.asarray(losses, dtype=np.float64)
    return float(sum((a - b) ** 2 for a, b in itertools.combinations(v, 2)))


def combined_loss(pred: Tensor, local: Tensor, global_: Tensor, lambda0: float, lambda1: float) -> Tensor:
    """``pred + lambda0 * local + lambda1 * global``; zero-weight terms are left out of the graph."""
    for name, t in (("pred", pred), ("local", local), ("global", global_)):
        if not math.isfinite(float(t.value)):
            raise TrainingDiverged(f"non-finite {name} loss: {float(t.value)}")
    total = pred
    if lambda0:
        total = ad.add(total, ad.scale(local, lambda0))
    if lambda1:
        total = ad.add(total, ad.scale(global_, lambda1))
    return total


# ---------------------------------------------------------------- training loops


@dataclass
class TrainResult:
    params: BackboneParams
    predictors: list[WeightPredictor]
    log: list[LossBreakdown]
    model: str = "stable"

    def log_lines(self) -> list[str]:
        return [json.dumps(b.to_record(), sort_keys=True) for b in self.log]


def _rngs(seed: int):
    init_ss, drop_ss, inner_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_ss), np.random.default_rng(drop_ss), np.random.default_rng(inner_ss)


def init_model(dims: list[int], num_envs: int, mode: str, rng: np.random.Generator):
    """Backbone first, then one predictor per environment, in a fixed draw order."""
    params = BackboneParams.init(dims, rng)
    predictors = [WeightPredictor.init(dims, rng, env=e, mode=mode) for e in range(num_envs)]
    return params, predictors


def train_stable(graph: Graph, env_set: EnvironmentSet, config: TrainConfig, callback=None,
                 inner_callback=None) -> TrainResult:
    """Alternate predictor fitting on generated environments with a regularized backbone step.

    Each epoch: with the backbone frozen, every generated environment's predictor
    takes ``inner_steps`` Adam steps on its own cross-entropy and its weights are
    cached (detached, no dropout). Then backbone plus observational predictor take
    one step on ``pred + lambda0 * local + lambda1 * global``.

    ``callback(record, params, predictors)`` runs after every outer step and
    ``inner_callback(epoch, env, params, predictors)`` after each environment's
    inner phase, while the backbone is still frozen.
    """
    init_rng, drop_rng, inner_rng = _rngs(config.seed)
    dims = config.dims(graph.features.shape[1], graph.num_classes)
    params, predictors = init_model(dims, len(env_set), config.weight_mode, init_rng)
    fcfg = config.forward_config
    outer = Adam(params.parameters() + predictors[0].parameters(), lr=config.lr, weight_decay=config.weight_decay)
    inner_lr = config.inner_lr if config.inner_lr is not None else config.lr
    inners = [Adam(p.parameters(), lr=inner_lr) for p in predictors[1:]]
    labeled = env_set.labeled_sets
    x = Tensor(graph.features)
    log = []
    for epoch in range(config.epochs):
        cached = []
        params.freeze()
        for e in range(1, len(env_set)):
            opt = inners[e - 1]
            for _ in range(config.inner_steps):
                opt.zero_grad()
                out = forward_backbone(graph, e, params, predictors, True, inner_rng, fcfg, x)
                loss, _ = ad.masked_cross_entropy(out.logits, graph.labels, env_set.masks[e])
                if not math.isfinite(float(loss.value)):
                    raise TrainingDiverged(f"inner loss diverged at epoch {epoch}, environment {e}")
                loss.backward()
                opt.step()
            out = forward_backbone(graph, e, params, predictors, False, None, fcfg, x)
            cached.append([a.detach() for a in out.alphas])
            if inner_callback is not None:
                inner_callback(epoch, e, params, predictors)
        params.unfreeze()

        outer.zero_grad()
        out = forward_backbone(graph, 0, params, predictors, True, drop_rng, fcfg, x)
        pred, per_node = ad.masked_cross_entropy(out.logits, graph.labels, env_set.masks[0])
        sub = env_subloss(per_node, labeled)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            glob = global_regularizer(sub)
        loc = local_regularizer(out.alphas, cached)
        try:
            total = combined_loss(pred, loc, glob, config.lambda0, config.lambda1)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        total.backward()
        outer.step()
        rec = LossBreakdown(epoch, float(pred.value), float(loc.value), float(glob.value),
                            float(total.value), [float(v) for v in sub.value])
        log.append(rec)
        if callback is not None:
            callback(rec, params, predictors)
    return TrainResult(params, predictors, log, "stable")


def train_baseline(graph: Graph, train_mask, config: TrainConfig, model: str = "gat", callback=None) -> TrainResult:
    """Plain single-environment cross-entropy training of a GAT or GCN."""
    if model not in ("gat", "gcn"):
        raise ValueError(f"unknown baseline {model!r}")
    train_mask = np.asarray(train_mask)
    if train_mask.dtype != bool:
        m = np.zeros(graph.num_nodes, dtype=bool)
        m[train_mask] = True
        train_mask = m
    init_rng, drop_rng, _ = _rngs(config.seed)
    dims = config.dims(graph.features.shape[1], graph.num_classes)
    if model == "gat":
        params, predictors = init_model(dims, 1, config.weight_mode, init_rng)
        trainable = params.parameters() + predictors[0].parameters()
    else:
        params, predictors = BackboneParams.init(dims, init_rng), []
        trainable = params.parameters()
    opt = Adam(trainable, lr=config.lr, weight_decay=config.weight_decay)
    fcfg = config.forward_config
    x = Tensor(graph.features)
    log = []
    for epoch in range(config.epochs):
        opt.zero_grad()
        if model == "gat":
            out = forward_backbone(graph, 0, params, predictors, True, drop_rng, fcfg, x)
        else:
            out = forward_gcn(graph, params, True, drop_rng, fcfg)
        loss, _ = ad.masked_cross_entropy(out.logits, graph.labels, train_mask)
        if not math.isfinite(float(loss.value)):
            raise TrainingDiverged(f"loss diverged at epoch {epoch}")
        loss.backward()
        opt.step()
        rec = LossBreakdown(epoch, float(loss.value), 0.0, 0.0, float(loss.value), [float(loss.value)])
        log.append(rec)
        if callback is not None:
            callback(rec, params, predictors)
    return TrainResult(params, predictors, log, model)


def predict_logits(graph: Graph, result: TrainResult, config: TrainConfig | None = None) -> np.ndarray:
    """Eval-mode logits using the observational predictor."""
    fcfg = (config or TrainConfig()).forward_config
    if result.model == "gcn":
        return forward_gcn(graph, result.params, False, None, fcfg).logits.value
    return forward_backbone(graph, 0, result.params, result.predictors, False, None, fcfg).logits.value
