"""Task metrics, stability metrics and the score report."""

from __future__ import annotations

import csv
import io
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np


def accuracy(logits, labels, mask) -> float:
    """Fraction of masked nodes whose argmax (lowest class id on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask
    if len(idx) == 0:
        raise ValueError("accuracy over an empty mask")
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == labels[idx]))


def average_score(scores) -> float:
    """Correctly rounded arithmetic mean."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("average_score of no environments")
    return float(sum(map(Fraction, s.tolist())) / s.size)


def stability_error(scores) -> float:
    """Bessel-corrected standard deviation of per-environment scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ValueError("stability_error needs at least two environments")
    if np.all(s == s[0]):
        return 0.0
    mu = average_score(s)
    return math.sqrt(math.fsum((s - mu) ** 2) / (s.size - 1))


@dataclass
class RankingResult:
    """Top-N lists per user plus the held-out relevance sets."""

    items: dict[int, list[int]]
    relevance: dict[int, set[int]] = field(default_factory=dict)

    def subset(self, users) -> "RankingResult":
        users = [int(u) for u in users]
        return RankingResult({u: self.items[u] for u in users if u in self.items},
                             {u: self.relevance.get(u, set()) for u in users})


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def dcg(ranked, relevant, n: int) -> float:
    """DCG of the first ``n`` entries; rank 1 is discounted by log2(2)."""
    top = list(ranked)[:n]
    gains = np.array([1.0 if r in relevant else 0.0 for r in top])
    return float(np.dot(gains, _discounts(len(top)))) if top else 0.0


def ideal_dcg(num_relevant: int, n: int) -> float:
    k = min(num_relevant, n)
    return float(_discounts(k).sum()) if k else 0.0


def ndcg_at_n(ranking: RankingResult, n: int) -> float:
    """User-averaged DCG@N divided by the user-averaged ideal DCG@N.

    Users with an empty relevance set are skipped.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    num = den = 0.0
    for u, rel in ranking.relevance.items():
        if not rel:
            continue
        num += dcg(ranking.items.get(u, []), rel, n)
        den += ideal_dcg(len(rel), n)
    if den == 0.0:
        raise ValueError("every user has an empty relevance set")
    return num / den


def per_user_ndcg(ranking: RankingResult, n: int) -> dict[int, tuple[float, float]]:
    """``user -> (dcg, idcg)``; lets callers pool arbitrary user subsets cheaply."""
    out = {}
    for u, rel in ranking.relevance.items():
        if rel:
            out[u] = (dcg(ranking.items.get(u, []), rel, n), ideal_dcg(len(rel), n))
    return out


@dataclass
class ScoreReport:
    """Per-environment scores with their mean and Bessel-corrected spread."""

    entries: list[dict]
    metric: str = "accuracy"
    metadata: dict = field(default_factory=dict)
    average_score: float = float("nan")
    stability_error: float = float("nan")

    @classmethod
    def from_scores(cls, envs, scores, metric="accuracy", metadata=None) -> "ScoreReport":
        entries = [{"env": e, "score": float(s)} for e, s in zip(envs, scores)]
        scores = [float(s) for s in scores]
        stab = stability_error(scores) if len(scores) >= 2 else 0.0
        return cls(entries, metric, dict(metadata or {}), average_score(scores), stab)

    @property
    def scores(self) -> list[float]:
        return [e["score"] for e in self.entries]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        return cls(**json.loads(text))

    def to_csv(self, percent: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["env", self.metric])
        for e in self.entries:
            w.writerow([e["env"], repr(e["score"] * 100.0 if percent else e["score"])])
        return buf.getvalue()
