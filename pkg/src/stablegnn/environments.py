"""Biased selection and environment construction.

A node (or user) is kept with probability ``tau`` when it falls in the
privileged group and ``1 - tau`` otherwise. The privileged group is either
``label >= threshold`` or ``attribute == value``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import BipartiteGraph, Graph

AGE_SECTIONS_YOUNG = ("1-18", "19-25")


@dataclass(frozen=True)
class BiasSpec:
    """Selection factor plus bias ratio.

    ``factor`` is ``"label"`` (privileged: ``label >= threshold``) or
    ``"attribute"`` (privileged: ``attributes[attr_name] == attr_value``).
    ``threshold=None`` means the median label.
    """

    factor: str = "label"
    tau: float = 0.8
    threshold: int | None = None
    attr_name: str | None = None
    attr_value: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.factor not in ("label", "attribute"):
            raise ValueError(f"unknown bias factor {self.factor!r}")
        if self.factor == "attribute" and (self.attr_name is None or self.attr_value is None):
            raise ValueError("attribute bias needs attr_name and attr_value")

    @classmethod
    def parse(cls, text: str, tau: float, seed: int = 0) -> "BiasSpec":
        """Parse ``label``, ``label:T`` or ``attr:NAME=VALUE``."""
        if text == "label":
            return cls("label", tau, seed=seed)
        if text.startswith("label:"):
            return cls("label", tau, threshold=int(text[6:]), seed=seed)
        if text.startswith("attr:") and "=" in text:
            name, value = text[5:].split("=", 1)
            return cls("attribute", tau, attr_name=name, attr_value=value, seed=seed)
        raise ValueError(f"bias factor must be 'label', 'label:T' or 'attr:NAME=VALUE', got {text!r}")

    def with_tau(self, tau: float) -> "BiasSpec":
        return BiasSpec(self.factor, tau, self.threshold, self.attr_name, self.attr_value, self.seed)


def _population(data) -> int:
    return data.num_users if isinstance(data, BipartiteGraph) else data.num_nodes


def _candidates(data, candidate_nodes) -> np.ndarray:
    n = _population(data)
    if candidate_nodes is None:
        return np.arange(n)
    cand = np.asarray(candidate_nodes)
    if cand.dtype == bool:
        if cand.shape != (n,):
            raise ValueError("boolean candidate mask has the wrong length")
        return np.flatnonzero(cand)
    return np.unique(cand.astype(np.int64))


def median_threshold(labels: np.ndarray) -> int:
    """Smallest label at or above the median so the two sides are roughly equal."""
    labels = np.asarray(labels)
    thr = int(np.ceil(np.median(labels)))
    if thr <= labels.min():
        thr = int(labels.min()) + 1
    return thr


def _bernoulli_mask(n, cand, privileged, tau, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    prob = np.where(privileged, tau, 1.0 - tau)
    draw = rng.random(len(cand))
    mask = np.zeros(n, dtype=bool)
    mask[cand[draw < prob]] = True
    return mask


def biased_select_by_label(graph: Graph, candidate_nodes, threshold, tau, seed) -> np.ndarray:
    """Keep candidate ``i`` with prob ``tau`` if ``y_i >= threshold`` else ``1 - tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    cand = _candidates(graph, candidate_nodes)
    privileged = graph.labels[cand] >= threshold
    return _bernoulli_mask(graph.num_nodes, cand, privileged, tau, seed)


def biased_select_by_attribute(data, candidate_nodes, attr_name, privileged_value, tau, seed) -> np.ndarray:
    """Keep candidate ``i`` with prob ``tau`` if its attribute equals ``privileged_value``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if attr_name not in data.attributes:
        raise KeyError(f"unknown attribute {attr_name!r}; have {sorted(data.attributes)}")
    column = np.asarray(data.attributes[attr_name], dtype=object)
    if privileged_value not in set(column.tolist()):
        raise ValueError(f"value {privileged_value!r} never occurs in attribute {attr_name!r}")
    cand = _candidates(data, candidate_nodes)
    privileged = column[cand] == privileged_value
    return _bernoulli_mask(_population(data), cand, privileged, tau, seed)


def privileged_mask(data, spec: BiasSpec) -> np.ndarray:
    """Boolean mask of the group selected with probability ``tau``."""
    if spec.factor == "label":
        thr = spec.threshold if spec.threshold is not None else median_threshold(data.labels)
        return data.labels >= thr
    return np.asarray(data.attributes[spec.attr_name], dtype=object) == spec.attr_value


def biased_select(data, candidate_nodes, spec: BiasSpec, seed) -> np.ndarray:
    if spec.factor == "label":
        thr = spec.threshold if spec.threshold is not None else median_threshold(data.labels)
        return biased_select_by_label(data, candidate_nodes, thr, spec.tau, seed)
    return biased_select_by_attribute(data, candidate_nodes, spec.attr_name, spec.attr_value, spec.tau, seed)


def group_age(section: str) -> str:
    """Collapse platform age sections into ``"<=25"`` (1-18, 19-25) and ``">25"``."""
    return "<=25" if section.strip() in AGE_SECTIONS_YOUNG else ">25"


@dataclass
class EnvironmentSet:
    """Observational environment 0 plus generated biased subsets of it."""

    masks: list[np.ndarray]
    taus: list[float | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.masks:
            raise ValueError("environment 0 is required")
        base = self.masks[0]
        for e, m in enumerate(self.masks):
            if m.shape != base.shape:
                raise ValueError("environment masks must share one length")
            if not m.any():
                raise ValueError(f"environment {e} has no labeled nodes")
            if np.any(m & ~base):
                raise ValueError(f"environment {e} is not a subset of environment 0")
        if not self.taus:
            self.taus = [None] * len(self.masks)

    @property
    def num_generated(self) -> int:
        return len(self.masks) - 1

    def __len__(self):
        return len(self.masks)

    @property
    def labeled_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.masks]


def build_environments(data, train_nodes, bias_spec: BiasSpec, num_generated: int = 2,
                       seed: int | None = None) -> EnvironmentSet:
    """Environment 0 = ``train_nodes``; environments 1..K alternate ``tau`` and ``1 - tau``.

    ``num_generated=0`` yields only the observational environment.
    """
    if num_generated < 0:
        raise ValueError("num_generated must be non-negative")
    seed = bias_spec.seed if seed is None else seed
    base = np.zeros(_population(data), dtype=bool)
    base[_candidates(data, train_nodes)] = True
    masks, taus = [base], [None]
    for e in range(1, num_generated + 1):
        tau = bias_spec.tau if e % 2 == 1 else 1.0 - bias_spec.tau
        env_seed = np.random.SeedSequence([seed, 7919, e])
        mask = biased_select(data, base, bias_spec.with_tau(tau), env_seed)
        if not mask.any():
            raise ValueError(f"environment {e} has no labeled nodes")
        masks.append(mask)
        taus.append(tau)
    return EnvironmentSet(masks, taus)


def make_test_environments(data, test_nodes, bias_spec: BiasSpec, tau_list, seed: int) -> list[np.ndarray]:
    """One independent biased selection of ``test_nodes`` per test ratio."""
    masks = []
    for k, tau in enumerate(tau_list):
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        env_seed = np.random.SeedSequence([seed, 104729, k])
        masks.append(biased_select(data, test_nodes, bias_spec.with_tau(float(tau)), env_seed))
    return masks


def split_nodes(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint train/test pools."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    perm = rng.permutation(n)
    k = int(round(train_fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])
