"""Stable graph recommender: NGCF-style propagation with per-environment sigmoid edge gates."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tensor
from .environments import EnvironmentSet
from .graph import BipartiteGraph
from .layers import glorot
from .metrics import RankingResult
from .training import (LossBreakdown, TrainingDiverged, combined_loss, env_subloss, global_regularizer,
                       local_regularizer)


@dataclass
class RecConfig:
    dim: int = 64
    layers: int = 3
    lr: float = 0.01
    inner_lr: float | None = None
    epochs: int = 120
    inner_steps: int = 1
    lambda0: float = 1.0
    lambda1: float = 1.0
    weight_decay: float = 0.0
    concat_layers: bool = True
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("lambda0 and lambda1 must be non-negative")
        if self.epochs < 1 or self.layers < 0 or self.dim < 1:
            raise ValueError("epochs >= 1, layers >= 0 and dim >= 1 required")


@dataclass
class RecParams:
    """Layer-0 id embeddings (users first), per-layer W1/W2, one gate vector per environment."""

    embedding: Parameter
    W1: list[Parameter]
    W2: list[Parameter]
    gates: list[Parameter]
    num_users: int

    @classmethod
    def init(cls, num_users, num_items, dim, layers, num_envs, rng, init_std=0.1) -> "RecParams":
        emb = Parameter(rng.normal(0.0, init_std, (num_users + num_items, dim)), name="E0")
        W1 = [Parameter(glorot(rng, (dim, dim)), name=f"W1_{k}") for k in range(layers)]
        W2 = [Parameter(glorot(rng, (dim, dim)), name=f"W2_{k}") for k in range(layers)]
        gates = [Parameter(glorot(rng, (2 * dim,)), name=f"a{e}") for e in range(num_envs)]
        return cls(emb, W1, W2, gates, num_users)

    def backbone(self) -> list[Parameter]:
        return [self.embedding, *self.W1, *self.W2]

    def freeze_backbone(self):
        for p in self.backbone():
            p.freeze()

    def unfreeze_backbone(self):
        for p in self.backbone():
            p.unfreeze()


@dataclass(frozen=True, eq=False)
class Interactions:
    """Deduplicated training edges with degree normalisation."""

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    norm: np.ndarray

    @classmethod
    def from_bipartite(cls, bip: BipartiteGraph) -> "Interactions":
        keys = np.unique(bip.users * bip.num_items + bip.items)
        users, items = keys // bip.num_items, keys % bip.num_items
        du = np.bincount(users, minlength=bip.num_users)
        di = np.bincount(items, minlength=bip.num_items)
        if np.any(du == 0):
            raise ValueError(f"user {int(np.argmax(du == 0))} has no training interactions")
        if np.any(di == 0):
            raise ValueError(f"item {int(np.argmax(di == 0))} has no training interactions")
        norm = 1.0 / np.sqrt(du[users].astype(float) * di[items])
        return cls(bip.num_users, bip.num_items, users, items, norm)

    def __len__(self):
        return len(self.users)


def rec_edge_weights(params: RecParams, graph: Interactions, env: int) -> Tensor:
    """``sigmoid(a_e . [e_u^0 || e_i^0])`` per interaction, shared by every layer."""
    d = params.embedding.shape[1]
    a = params.gates[env]
    su = ad.matmul(params.embedding, ad.take(a, np.arange(d)))
    si = ad.matmul(params.embedding, ad.take(a, np.arange(d, 2 * d)))
    return ad.sigmoid(ad.add(ad.take(su, graph.users), ad.take(si, graph.items + graph.num_users)))


def propagate_bipartite(params: RecParams, graph: Interactions, alphas: Tensor | None,
                        num_layers: int | None = None, activation=None) -> list[Tensor]:
    """Embedding tables (users stacked over items) after each layer, layer 0 included.

    ``alphas=None`` means every gate is 1.
    """
    act = activation or (lambda t: ad.leaky_relu(t, 0.2))
    L = len(params.W1) if num_layers is None else num_layers
    U = graph.num_users
    coef = Tensor(graph.norm) if alphas is None else ad.mul(alphas, graph.norm)
    emb = params.embedding
    layers = [emb]
    user_idx, item_idx = np.arange(U), np.arange(U, U + graph.num_items)
    for k in range(L):
        eu, ei = ad.take(emb, user_idx), ad.take(emb, item_idx)
        agg_u = ad.edge_aggregate(coef, ei, graph.items, graph.users, U)
        agg_i = ad.edge_aggregate(coef, eu, graph.users, graph.items, graph.num_items)
        W1, W2 = params.W1[k], params.W2[k]
        new_u = act(ad.add(ad.matmul(ad.add(eu, agg_u), W1), ad.matmul(ad.mul(eu, agg_u), W2)))
        new_i = act(ad.add(ad.matmul(ad.add(ei, agg_i), W1), ad.matmul(ad.mul(ei, agg_i), W2)))
        emb = ad.concat([new_u, new_i], axis=0)
        layers.append(emb)
    return layers


def final_embeddings(layers: list[Tensor], num_users: int, concat: bool = True) -> tuple[Tensor, Tensor]:
    rep = ad.concat(layers, axis=1) if concat else layers[-1]
    n = rep.shape[0]
    return ad.take(rep, np.arange(num_users)), ad.take(rep, np.arange(num_users, n))


def bpr_loss(user_emb: Tensor, item_emb: Tensor, users, pos_items, neg_items) -> tuple[Tensor, Tensor]:
    """Mean and per-interaction ``-log sigmoid(s(u, i+) - s(u, i-))`` with dot-product scores."""
    eu = ad.take(user_emb, users)
    pos = ad.sum_rows(ad.mul(eu, ad.take(item_emb, pos_items)))
    neg = ad.sum_rows(ad.mul(eu, ad.take(item_emb, neg_items)))
    per = ad.scale(ad.log_sigmoid(ad.sub(pos, neg)), -1.0)
    return ad.mean(per), per


def sample_negatives(graph: Interactions, rng: np.random.Generator, rounds: int = 10) -> np.ndarray:
    """One uniform negative per interaction, re-drawn (bounded) when it hits a positive."""
    pos_keys = graph.users * graph.num_items + graph.items
    neg = rng.integers(0, graph.num_items, len(graph))
    for _ in range(rounds):
        bad = np.isin(graph.users * graph.num_items + neg, pos_keys)
        if not bad.any():
            break
        neg[bad] = rng.integers(0, graph.num_items, int(bad.sum()))
    return neg


def recommend_topn(user_emb, item_emb, exclude: list[set[int]] | None, n: int = 100, users=None) -> RankingResult:
    """Top-``n`` items per user by dot product; ties go to the lower item id."""
    U = np.asarray(user_emb.value if isinstance(user_emb, Tensor) else user_emb)
    I = np.asarray(item_emb.value if isinstance(item_emb, Tensor) else item_emb)
    users = np.arange(U.shape[0]) if users is None else np.asarray(users)
    out = {}
    for start in range(0, len(users), 256):
        block = users[start:start + 256]
        scores = U[block] @ I.T
        for row, u in zip(scores, block.tolist()):
            order = np.argsort(-row, kind="stable")
            ex = exclude[u] if exclude is not None else ()
            if ex:
                order = order[~np.isin(order, list(ex))]
            out[u] = order[:n].tolist()
    return RankingResult(out)


@dataclass
class RecTrainResult:
    params: RecParams
    graph: Interactions
    config: RecConfig
    log: list[LossBreakdown] = field(default_factory=list)
    gated: bool = True

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        alphas = rec_edge_weights(self.params, self.graph, 0) if self.gated else None
        layers = propagate_bipartite(self.params, self.graph, alphas)
        u, i = final_embeddings(layers, self.graph.num_users, self.config.concat_layers)
        return u.value, i.value


def _interaction_subsets(graph: Interactions, env_set: EnvironmentSet):
    """Interaction indices of env-0 users plus, per environment, positions inside that list."""
    base = np.flatnonzero(env_set.masks[0][graph.users])
    if base.size == 0:
        raise ValueError("environment 0 has no training interactions")
    positions = []
    for e, m in enumerate(env_set.masks):
        pos = np.flatnonzero(m[graph.users[base]])
        if pos.size == 0:
            raise ValueError(f"environment {e} has no training interactions")
        positions.append(pos)
    return base, positions


def _rngs(seed):
    init_ss, neg_ss = np.random.SeedSequence([seed, 2]).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(neg_ss)


def _forward_bpr(params, graph, env, idx, neg, config):
    alphas = rec_edge_weights(params, graph, env)
    layers = propagate_bipartite(params, graph, alphas)
    ue, ie = final_embeddings(layers, graph.num_users, config.concat_layers)
    loss, per = bpr_loss(ue, ie, graph.users[idx], graph.items[idx], neg[idx])
    return loss, per, alphas


def train_stable_recommender(train: BipartiteGraph | Interactions, env_set: EnvironmentSet,
                             config: RecConfig, callback=None, inner_callback=None) -> RecTrainResult:
    """Alternating predictor/backbone training on BPR; environments are user masks.

    Interactions inherit every environment membership of their user.
    """
    graph = train if isinstance(train, Interactions) else Interactions.from_bipartite(train)
    init_rng, neg_rng = _rngs(config.seed)
    params = RecParams.init(graph.num_users, graph.num_items, config.dim, config.layers, len(env_set),
                            init_rng, config.init_std)
    outer = Adam(params.backbone() + [params.gates[0]], lr=config.lr, weight_decay=config.weight_decay)
    inner_lr = config.inner_lr if config.inner_lr is not None else config.lr
    inners = [Adam([g], lr=inner_lr) for g in params.gates[1:]]
    base, positions = _interaction_subsets(graph, env_set)
    env_idx = [base[p] for p in positions]
    log = []
    for epoch in range(config.epochs):
        neg = sample_negatives(graph, neg_rng)
        cached = []
        params.freeze_backbone()
        for e in range(1, len(env_set)):
            for _ in range(config.inner_steps):
                inners[e - 1].zero_grad()
                loss, _, _ = _forward_bpr(params, graph, e, env_idx[e], neg, config)
                if not math.isfinite(float(loss.value)):
                    raise TrainingDiverged(f"inner loss diverged at epoch {epoch}, environment {e}")
                loss.backward()
                inners[e - 1].step()
            cached.append([rec_edge_weights(params, graph, e).detach()])
            if inner_callback is not None:
                inner_callback(epoch, e, params)
        params.unfreeze_backbone()

        outer.zero_grad()
        pred, per, alpha0 = _forward_bpr(params, graph, 0, base, neg, config)
        sub = env_subloss(per, positions)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            glob = global_regularizer(sub)
        loc = local_regularizer([alpha0], cached)
        try:
            total = combined_loss(pred, loc, glob, config.lambda0, config.lambda1)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        total.backward()
        outer.step()
        rec = LossBreakdown(epoch, float(pred.value), float(loc.value), float(glob.value), float(total.value),
                            [float(v) for v in sub.value])
        log.append(rec)
        if callback is not None:
            callback(rec, params)
    return RecTrainResult(params, graph, config, log, gated=True)


def train_ngcf(train: BipartiteGraph | Interactions, user_mask, config: RecConfig, gated: bool = True,
               callback=None) -> RecTrainResult:
    """Single-environment BPR training of the propagation model.

    ``gated=True`` keeps a learned observational gate (the unregularized
    counterpart of the stable model); ``gated=False`` fixes every gate to 1.
    """
    graph = train if isinstance(train, Interactions) else Interactions.from_bipartite(train)
    init_rng, neg_rng = _rngs(config.seed)
    params = RecParams.init(graph.num_users, graph.num_items, config.dim, config.layers, 1, init_rng,
                            config.init_std)
    trainable = params.backbone() + ([params.gates[0]] if gated else [])
    opt = Adam(trainable, lr=config.lr, weight_decay=config.weight_decay)
    base = np.flatnonzero(np.asarray(user_mask, dtype=bool)[graph.users])
    if base.size == 0:
        raise ValueError("no training interactions for the selected users")
    log = []
    for epoch in range(config.epochs):
        neg = sample_negatives(graph, neg_rng)
        opt.zero_grad()
        if gated:
            loss, _, _ = _forward_bpr(params, graph, 0, base, neg, config)
        else:
            layers = propagate_bipartite(params, graph, None)
            ue, ie = final_embeddings(layers, graph.num_users, config.concat_layers)
            loss, _ = bpr_loss(ue, ie, graph.users[base], graph.items[base], neg[base])
        if not math.isfinite(float(loss.value)):
            raise TrainingDiverged(f"loss diverged at epoch {epoch}")
        loss.backward()
        opt.step()
        v = float(loss.value)
        log.append(LossBreakdown(epoch, v, 0.0, 0.0, v, [v]))
        if callback is not None:
            callback(log[-1], params)
    return RecTrainResult(params, graph, config, log, gated=gated)
