"""Seeded experiment runner: data, environments, training, test sweeps and report files."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .environments import BiasSpec, biased_select, build_environments, make_test_environments, split_nodes
from .graph import BipartiteGraph, Graph, generate_synthetic, generate_synthetic_bipartite, load_graph, load_interactions
from .metrics import ScoreReport, accuracy, ndcg_at_n
from .recommender import (Interactions, RecConfig, RecTrainResult, recommend_topn, train_ngcf,
                          train_stable_recommender)
from .training import TrainConfig, TrainResult, predict_logits, train_baseline, train_stable

NODE_MODELS = ("stable", "gat", "gcn")
REC_MODELS = ("stable-rec", "ngcf-rec")
DEFAULT_TAUS = tuple(round(0.1 * k, 1) for k in range(11))

# named defaults; explicit config values always win
PRESETS: dict[str, dict] = {
    "synthetic": dict(dataset="synthetic", models=("gat", "stable"), tau_train=0.8, epochs=200, lr=0.005,
                      hidden=8, dropout=0.6, weight_decay=5e-4, train_fraction=0.2),
    "citeseer": dict(dataset="files", models=("gat", "stable"), tau_train=0.8, epochs=200, lr=0.005, hidden=8,
                     dropout=0.6, weight_decay=5e-4),
    "arxiv": dict(dataset="files", models=("gat", "stable"), tau_train=0.8, epochs=1000, lr=0.002, hidden=250,
                  dropout=0.75, weight_decay=0.0),
    "rec-synthetic": dict(dataset="rec-synthetic", models=("ngcf-rec", "stable-rec"), bias_factor="attr:gender=M",
                          tau_train=0.6, epochs=120, lr=0.01, hidden=64, layers=3, dropout=0.0),
}
BIAS_PRESETS = {"heavy": 0.9, "medium": 0.8, "light": 0.7}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    attrs: str | None = None
    interactions: str | None = None
    models: tuple = ("gat", "stable")
    bias_factor: str = "label"
    tau_train: float = 0.8
    tau_test: tuple = DEFAULT_TAUS
    env_tau: float | None = None
    k_envs: int = 2
    lambda0: float = 1.0
    lambda1: float = 1.0
    epochs: int = 200
    inner_steps: int = 1
    hidden: int = 64
    layers: int = 2
    lr: float = 0.005
    dropout: float = 0.6
    input_dropout: float = 0.1
    weight_decay: float = 0.0
    weight_mode: str = "softmax"
    seeds: tuple = (0,)
    ndcg_n: int = 100
    train_fraction: float = 0.1
    # synthetic node graph
    num_nodes: int = 2000
    num_classes: int = 2
    feature_dim: int = 1000
    intra: float = 0.02
    inter: float = 0.002
    class_signal: float = 1.0
    # synthetic interactions
    num_users: int = 500
    num_items: int = 800
    group_shift: float = 3.0
    rec_eval: str = "attribute"
    out: str = "runs"

    def __post_init__(self):
        self.models = tuple(self.models)
        self.tau_test = tuple(float(t) for t in self.tau_test)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.dataset not in ("synthetic", "files", "rec-synthetic"):
            bad("dataset", f"unknown dataset {self.dataset!r}")
        if not self.models:
            bad("models", "at least one model required")
        rec = self.is_recommendation
        for m in self.models:
            if m not in NODE_MODELS + REC_MODELS:
                bad("models", f"unknown model {m!r}")
            if (m in REC_MODELS) != rec:
                bad("models", f"model {m!r} does not fit dataset {self.dataset!r}")
        if self.dataset == "files":
            missing = [n for n in ("edges", "features", "labels") if getattr(self, n) is None]
            if missing and self.interactions is None:
                bad(missing[0], "path required for dataset 'files'")
        for name in ("tau_train",) + (("env_tau",) if self.env_tau is not None else ()):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad(name, "must lie in [0, 1]")
        if not self.tau_test:
            bad("tau_test", "at least one test ratio required")
        if any(not 0.0 <= t <= 1.0 for t in self.tau_test):
            bad("tau_test", "ratios must lie in [0, 1]")
        for name in ("k_envs", "inner_steps", "layers"):
            if getattr(self, name) < 0:
                bad(name, "must be non-negative")
        for name in ("epochs", "hidden", "ndcg_n"):
            if getattr(self, name) < 1:
                bad(name, "must be positive")
        if self.lambda0 < 0 or self.lambda1 < 0:
            bad("lambda0" if self.lambda0 < 0 else "lambda1", "must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", "must lie in [0, 1)")
        if self.weight_mode not in ("softmax", "sigmoid"):
            bad("weight_mode", "expected softmax or sigmoid")
        if not 0.0 < self.train_fraction < 1.0:
            bad("train_fraction", "must lie in (0, 1)")
        if self.rec_eval not in ("attribute", "days"):
            bad("rec_eval", "expected attribute or days")
        if not self.seeds:
            bad("seeds", "at least one seed required")
        try:
            BiasSpec.parse(self.bias_factor, self.tau_train)
        except ValueError as exc:
            bad("bias_factor", str(exc))

    @property
    def is_recommendation(self) -> bool:
        return self.dataset == "rec-synthetic" or (self.dataset == "files" and self.interactions is not None)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict, preset: str | None = None) -> "ExperimentConfig":
        """Preset defaults overlaid with ``values``; unknown keys are rejected by name."""
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        merged = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"preset: unknown preset {preset!r}")
            merged.update(PRESETS[preset])
        merged.update(values)
        return cls(**merged)


def _coerce(name: str, text: str):
    """Parse a config-file value into the type of field ``name``."""
    f = {f.name: f for f in fields(ExperimentConfig)}.get(name)
    if f is None:
        raise ConfigError(f"{name}: unknown config key")
    default = f.default
    text = text.strip()
    try:
        if name in ("models", "tau_test", "seeds"):
            parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
            conv = {"models": str, "tau_test": float, "seeds": int}[name]
            return tuple(conv(p.strip()) for p in parts)
        if text.lower() in ("none", "") and (default is None or name == "env_tau"):
            return None
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or name == "env_tau":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r}") from exc
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` comments; dashes in keys allowed."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        key = {"model": "models", "seed": "seeds"}.get(key, key)
        out[key] = _coerce(key, value)
    return out


# ---------------------------------------------------------------- evaluation


def _node_logits(model, graph: Graph, config: TrainConfig | None):
    if isinstance(model, TrainResult):
        return predict_logits(graph, model, config)
    if hasattr(model, "decision_function"):
        return model.decision_function(graph)
    raise TypeError(f"cannot evaluate {type(model).__name__} on node classification")


def _rec_embeddings(model):
    if isinstance(model, RecTrainResult) or hasattr(model, "embeddings"):
        return model.embeddings()
    raise TypeError(f"cannot evaluate {type(model).__name__} on recommendation")


def evaluate_sweep(model, graph, test_env_masks, metric: str = "accuracy", envs=None, metadata=None,
                   config: TrainConfig | None = None, exclude=None, n: int = 100) -> ScoreReport:
    """Score one trained model on every test environment.

    Inference runs once. For ``metric="accuracy"`` ``graph`` is the node graph and
    masks select test nodes. For ``metric="ndcg"`` ``graph`` holds the held-out
    interactions (or one held-out log per mask) and masks select users;
    ``exclude`` lists each user's training items.
    """
    masks = [np.asarray(m, dtype=bool) for m in test_env_masks]
    envs = list(envs) if envs is not None else list(range(len(masks)))
    if len(envs) != len(masks):
        raise ValueError("one descriptor per test environment required")
    if metric == "accuracy":
        logits = _node_logits(model, graph, config)
        scores = [accuracy(logits, graph.labels, m) for m in masks]
    elif metric == "ndcg":
        if exclude is None and hasattr(model, "train_items_"):
            exclude = model.train_items_
        ue, ie = _rec_embeddings(model)
        ranking = recommend_topn(ue, ie, exclude, n)
        held = graph if isinstance(graph, (list, tuple)) else [graph] * len(masks)
        scores = []
        for m, h in zip(masks, held):
            rel = h.user_items()
            users = np.flatnonzero(m)
            sub = ranking.subset(users)
            sub.relevance = {int(u): rel[u] - (exclude[u] if exclude is not None else set()) for u in users}
            scores.append(ndcg_at_n(sub, n))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return ScoreReport.from_scores(envs, scores, metric, metadata)


# ---------------------------------------------------------------- runs


@dataclass
class RunOutput:
    model: str
    seed: int
    report: ScoreReport
    result: object
    files: list[Path] = field(default_factory=list)


def _train_config(cfg: ExperimentConfig, seed: int, lambdas: bool = True) -> TrainConfig:
    return TrainConfig(lambda0=cfg.lambda0 if lambdas else 0.0, lambda1=cfg.lambda1 if lambdas else 0.0,
                       lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs, inner_steps=cfg.inner_steps,
                       hidden=cfg.hidden, layers=cfg.layers, dropout=cfg.dropout, input_dropout=cfg.input_dropout,
                       weight_mode=cfg.weight_mode, seed=seed)


def _rec_config(cfg: ExperimentConfig, seed: int, lambdas: bool = True) -> RecConfig:
    return RecConfig(dim=cfg.hidden, layers=cfg.layers, lr=cfg.lr, epochs=cfg.epochs, inner_steps=cfg.inner_steps,
                     lambda0=cfg.lambda0 if lambdas else 0.0, lambda1=cfg.lambda1 if lambdas else 0.0,
                     weight_decay=cfg.weight_decay, seed=seed)


def load_node_data(cfg: ExperimentConfig, seed: int) -> Graph:
    if cfg.dataset == "synthetic":
        return generate_synthetic(cfg.num_nodes, cfg.num_classes, cfg.feature_dim, cfg.intra, cfg.inter,
                                  cfg.class_signal, seed)
    return load_graph(cfg.edges, cfg.features, cfg.labels, cfg.attrs)


def load_rec_data(cfg: ExperimentConfig, seed: int) -> BipartiteGraph:
    if cfg.dataset == "rec-synthetic":
        return generate_synthetic_bipartite(cfg.num_users, cfg.num_items, group_shift=cfg.group_shift, seed=seed)
    return load_interactions(cfg.interactions, cfg.attrs)


def _spec(cfg: ExperimentConfig, tau: float, seed: int) -> BiasSpec:
    return BiasSpec.parse(cfg.bias_factor, tau, seed=seed)


def run_node_seed(cfg: ExperimentConfig, seed: int) -> list[RunOutput]:
    graph = load_node_data(cfg, seed)
    train_pool, test_pool = split_nodes(graph.num_nodes, cfg.train_fraction, seed)
    spec = _spec(cfg, cfg.tau_train, seed)
    train_mask = biased_select(graph, train_pool, spec, np.random.SeedSequence([seed, 1]))
    env_spec = spec.with_tau(cfg.env_tau) if cfg.env_tau is not None else spec
    test_masks = make_test_environments(graph, test_pool, spec, cfg.tau_test, seed)
    outputs = []
    for model in cfg.models:
        tcfg = _train_config(cfg, seed, lambdas=model == "stable")
        if model == "stable":
            envs = build_environments(graph, train_mask, env_spec, cfg.k_envs, seed)
            result = train_stable(graph, envs, tcfg)
        else:
            result = train_baseline(graph, train_mask, tcfg, model)
        meta = _metadata(cfg, model, seed, train_nodes=int(train_mask.sum()))
        report = evaluate_sweep(result, graph, test_masks, "accuracy", envs=list(cfg.tau_test), metadata=meta,
                                config=tcfg)
        outputs.append(RunOutput(model, seed, report, result))
    return outputs


def run_rec_seed(cfg: ExperimentConfig, seed: int) -> list[RunOutput]:
    data = load_rec_data(cfg, seed)
    first, later = data.tags[0], data.tags[1:]
    if not later:
        raise ConfigError("interactions: need at least two day tags (first day trains, later days test)")
    train = data.select(first)
    graph = Interactions.from_bipartite(train)
    exclude = train.user_items()
    spec = _spec(cfg, cfg.tau_train, seed)
    user_mask = biased_select(data, None, spec, np.random.SeedSequence([seed, 1]))
    env_spec = spec.with_tau(cfg.env_tau) if cfg.env_tau is not None else spec
    if cfg.rec_eval == "attribute":
        held = data.select(later)
        masks = make_test_environments(data, None, spec, cfg.tau_test, seed)
        env_names, held_out = list(cfg.tau_test), held
    else:
        held_out = [data.select(t) for t in later]
        masks = [np.array([bool(r) for r in h.user_items()]) for h in held_out]
        env_names = [f"day{t}" for t in later]
    outputs = []
    for model in cfg.models:
        rcfg = _rec_config(cfg, seed, lambdas=model == "stable-rec")
        if model == "stable-rec":
            envs = build_environments(data, user_mask, env_spec, cfg.k_envs, seed)
            result = train_stable_recommender(graph, envs, rcfg)
        else:
            result = train_ngcf(graph, user_mask, rcfg)
        meta = _metadata(cfg, model, seed, train_users=int(user_mask.sum()))
        report = evaluate_sweep(result, held_out, masks, "ndcg", envs=env_names, metadata=meta,
                                exclude=exclude, n=cfg.ndcg_n)
        outputs.append(RunOutput(model, seed, report, result))
    return outputs


def _metadata(cfg: ExperimentConfig, model: str, seed: int, **extra) -> dict:
    return {"model": model, "seed": seed, "config_hash": cfg.config_hash(), "dataset": cfg.dataset,
            "tau_train": cfg.tau_train, "bias_factor": cfg.bias_factor, **extra}


def checkpoint_arrays(result) -> dict[str, np.ndarray]:
    """Flat name -> array dump of every trained parameter."""
    if isinstance(result, TrainResult):
        params = list(result.params.parameters())
        for p in result.predictors:
            params += p.parameters()
    elif isinstance(result, RecTrainResult):
        params = result.params.backbone() + list(result.params.gates)
    else:
        raise TypeError(f"cannot checkpoint {type(result).__name__}")
    return {p.name: p.value for p in params}


def write_run(output: RunOutput, out_dir, percent: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{output.model}_seed{output.seed}"
    paths = [out_dir / f"{stem}.json", out_dir / f"{stem}.csv", out_dir / f"{stem}_log.jsonl",
             out_dir / f"{stem}.npz"]
    paths[0].write_text(output.report.to_json(), encoding="utf-8")
    paths[1].write_text(output.report.to_csv(percent), encoding="utf-8")
    lines = [json.dumps(b.to_record(), sort_keys=True) for b in output.result.log]
    paths[2].write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    # np.savez stamps zip entries with the current time; write entries by hand for stable bytes
    _save_npz(paths[3], checkpoint_arrays(output.result))
    output.files = paths
    return paths


def _save_npz(path: Path, arrays: dict[str, np.ndarray]):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True, progress=None) -> list[RunOutput]:
    """Train and evaluate every (seed, model) pair; optionally write report files."""
    out_dir = Path(out_dir if out_dir is not None else cfg.out)
    outputs = []
    for seed in cfg.seeds:
        runs = run_rec_seed(cfg, seed) if cfg.is_recommendation else run_node_seed(cfg, seed)
        for run in runs:
            if write:
                write_run(run, out_dir)
            if progress is not None:
                progress(run)
        outputs.extend(runs)
    if write:
        conf = cfg.to_dict()
        conf.pop("out")
        summary = {"config": conf, "config_hash": cfg.config_hash(),
                   "runs": [{"model": r.model, "seed": r.seed, "average_score": r.report.average_score,
                             "stability_error": r.report.stability_error} for r in outputs]}
        (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return outputs


def load_checkpoint(path, model: str, cfg: ExperimentConfig, seed: int, data=None):
    """Rebuild a trained result from an ``.npz`` dump written by ``write_run``."""
    from .autodiff import Parameter
    from .layers import BackboneParams, WeightPredictor
    from .recommender import RecParams

    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}

    def param(name):
        if name not in arrays:
            raise ValueError(f"{path}: missing array {name!r}")
        return Parameter(arrays[name], name=name)

    if model in NODE_MODELS:
        n_layers = sum(1 for k in arrays if k.startswith("W"))
        params = BackboneParams([param(f"W{l}") for l in range(n_layers)])
        envs = sorted({int(k[1:].split("_")[0]) for k in arrays if k.startswith("a")})
        predictors = [WeightPredictor([param(f"a{e}_{l}") for l in range(n_layers)], e, cfg.weight_mode)
                      for e in envs]
        return TrainResult(params, predictors, [], model)
    if data is None:
        data = load_rec_data(cfg, seed)
    graph = Interactions.from_bipartite(data.select(data.tags[0]))
    n_layers = sum(1 for k in arrays if k.startswith("W1_"))
    gates = sorted(int(k[1:]) for k in arrays if k.startswith("a"))
    params = RecParams(param("E0"), [param(f"W1_{k}") for k in range(n_layers)],
                       [param(f"W2_{k}") for k in range(n_layers)], [param(f"a{e}") for e in gates],
                       graph.num_users)
    return RecTrainResult(params, graph, _rec_config(cfg, seed), [], gated=True)


def evaluate_saved(run_dir, overrides: dict | None = None, write: bool = True) -> list[RunOutput]:
    """Re-score the checkpoints in ``run_dir`` on regenerated test environments.

    ``overrides`` may change evaluation-only settings such as ``tau_test`` or ``ndcg_n``.
    """
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    values = dict(summary["config"])
    values.update(overrides or {})
    cfg = ExperimentConfig(**values)
    outputs = []
    for run in summary["runs"]:
        model, seed = run["model"], run["seed"]
        ckpt = run_dir / f"{model}_seed{seed}.npz"
        meta = _metadata(cfg, model, seed, checkpoint=ckpt.name)
        if cfg.is_recommendation:
            data = load_rec_data(cfg, seed)
            result = load_checkpoint(ckpt, model, cfg, seed, data)
            train = data.select(data.tags[0])
            later = data.tags[1:]
            if cfg.rec_eval == "attribute":
                spec = _spec(cfg, cfg.tau_train, seed)
                masks = make_test_environments(data, None, spec, cfg.tau_test, seed)
                held, names = data.select(later), list(cfg.tau_test)
            else:
                held = [data.select(t) for t in later]
                masks = [np.array([bool(r) for r in h.user_items()]) for h in held]
                names = [f"day{t}" for t in later]
            report = evaluate_sweep(result, held, masks, "ndcg", envs=names, metadata=meta,
                                    exclude=train.user_items(), n=cfg.ndcg_n)
        else:
            graph = load_node_data(cfg, seed)
            _, test_pool = split_nodes(graph.num_nodes, cfg.train_fraction, seed)
            masks = make_test_environments(graph, test_pool, _spec(cfg, cfg.tau_train, seed), cfg.tau_test, seed)
            result = load_checkpoint(ckpt, model, cfg, seed)
            report = evaluate_sweep(result, graph, masks, "accuracy", envs=list(cfg.tau_test), metadata=meta,
                                    config=_train_config(cfg, seed))
        out = RunOutput(model, seed, report, result)
        if write:
            stem = run_dir / f"eval_{model}_seed{seed}"
            stem.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
            stem.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        outputs.append(out)
    return outputs
