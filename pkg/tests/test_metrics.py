import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablegnn.metrics import (RankingResult, ScoreReport, accuracy, average_score, dcg, ideal_dcg, ndcg_at_n,
                               stability_error)


def test_accuracy_examples():
    logits = np.eye(3)[[0, 1, 2, 1, 0]]
    labels = np.array([0, 1, 2, 1, 0])
    assert accuracy(logits, labels, np.ones(5, bool)) == 1.0
    assert accuracy(logits, (labels + 1) % 3, np.ones(5, bool)) == 0.0
    wrong = labels.copy()
    wrong[[1, 3]] = 2
    assert accuracy(logits, wrong, np.ones(5, bool)) == pytest.approx(0.6)
    # ties resolve to the lowest class id
    assert accuracy(np.zeros((2, 3)), [0, 1], [True, True]) == 0.5
    with pytest.raises(ValueError):
        accuracy(logits, labels, np.zeros(5, bool))


def test_average_score_examples(rng):
    assert average_score([0.7]) == 0.7
    assert average_score([0.6, 0.8]) == pytest.approx(0.7, abs=1e-15)
    s = rng.uniform(0, 1, 37)
    assert abs(average_score(s) - sum(s.tolist()) / 37) <= 1e-15
    with pytest.raises(ValueError):
        average_score([])


def two_pass_std(s):
    n = len(s)
    mu = 0.0
    for x in s:
        mu += x
    mu /= n
    ss = 0.0
    for x in s:
        ss += (x - mu) * (x - mu)
    return math.sqrt(ss / (n - 1))


def test_stability_error_examples():
    assert stability_error([0.3, 0.3, 0.3]) == 0.0
    assert stability_error([0.1] * 11) == 0.0
    assert abs(stability_error([0.6, 0.8]) - math.sqrt(0.02)) < 1e-15
    with pytest.raises(ValueError):
        stability_error([0.5])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.floats(0.01, 100))
def test_stability_error_matches_two_pass_and_scales(scores, c):
    assert abs(stability_error(scores) - two_pass_std(scores)) <= 1e-12
    assert stability_error([c * s for s in scores]) == pytest.approx(c * stability_error(scores), rel=1e-9, abs=1e-12)


def test_stability_error_zero_iff_equal(rng):
    s = rng.uniform(0, 1, 5)
    assert stability_error(s) > 0
    assert stability_error(np.full(5, s[0])) == 0.0


def brute_ndcg(items, relevance, n):
    """Enumerate every position; ideal = best gain over all orderings of the relevant set."""
    num = den = 0.0
    for u, rel in relevance.items():
        if not rel:
            continue
        lst = items.get(u, [])[:n]
        num += sum(1.0 / math.log2(pos + 2) for pos, it in enumerate(lst) if it in rel)
        best = 0.0
        for perm in itertools.permutations(sorted(rel), min(len(rel), n)):
            best = max(best, sum(1.0 / math.log2(pos + 2) for pos in range(len(perm))))
        den += best
    return num / den


def test_ndcg_closed_form_examples():
    r = RankingResult({0: [5, 7, 9]}, {0: {7}})
    assert abs(ndcg_at_n(r, 3) - 1 / math.log2(3)) < 1e-15
    assert ndcg_at_n(RankingResult({0: [2, 1, 3]}, {0: {1, 2}}), 3) == pytest.approx(1.0)
    assert ndcg_at_n(RankingResult({0: [4, 5]}, {0: {1}}), 2) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_n(RankingResult({0: [1]}, {0: set()}), 1)
    with pytest.raises(ValueError):
        ndcg_at_n(r, 0)


def test_ndcg_matches_brute_force(rng):
    for _ in range(300):
        users = int(rng.integers(1, 4))
        items, relevance = {}, {}
        for u in range(users):
            length = int(rng.integers(0, 11))
            items[u] = rng.permutation(12)[:length].tolist()
            relevance[u] = set(rng.choice(12, int(rng.integers(0, 5)), replace=False).tolist())
        if not any(relevance.values()):
            relevance[0] = {0}
        n = int(rng.integers(1, 11))
        assert abs(ndcg_at_n(RankingResult(items, relevance), n) - brute_ndcg(items, relevance, n)) <= 1e-12


def test_ndcg_skips_users_without_relevance():
    r = RankingResult({0: [1], 1: [2]}, {0: {1}, 1: set()})
    assert ndcg_at_n(r, 1) == 1.0
    assert dcg([], {1}, 3) == 0.0 and ideal_dcg(0, 3) == 0.0


def test_report_aggregates_and_json_round_trip(rng):
    scores = rng.uniform(0.5, 1.0, 11)
    envs = [round(0.1 * k, 1) for k in range(11)]
    rep = ScoreReport.from_scores(envs, scores, "accuracy", {"seed": 3, "config_hash": "abc"})
    assert len(rep.entries) == 11
    # recompute the aggregates from the emitted entries only
    data = json.loads(rep.to_json())
    vals = [e["score"] for e in data["entries"]]
    assert data["average_score"] == pytest.approx(sum(vals) / len(vals), abs=1e-15)
    assert abs(data["stability_error"] - two_pass_std(vals)) <= 1e-12
    assert ScoreReport.from_json(rep.to_json()) == rep
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "env,accuracy" and len(csv_text.splitlines()) == 12
    assert float(rep.to_csv(percent=True).splitlines()[1].split(",")[1]) == pytest.approx(100 * scores[0])


def test_report_identical_scores():
    rep = ScoreReport.from_scores([0.0, 0.5, 1.0], [0.8, 0.8, 0.8])
    assert rep.stability_error == 0.0 and rep.average_score == 0.8
