"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

from .graph import BipartiteGraph, Graph


def check_graph(graph) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError(f"expected a Graph, got {type(graph).__name__}")
    if not np.all(np.isfinite(graph.features)):
        raise ValueError("graph features contain NaN or Inf")
    return graph


def check_bipartite(data) -> BipartiteGraph:
    if not isinstance(data, BipartiteGraph):
        raise TypeError(f"expected a BipartiteGraph, got {type(data).__name__}")
    if data.num_interactions == 0:
        raise ValueError("no interactions")
    return data


def check_node_mask(nodes, n: int, name: str = "nodes") -> np.ndarray:
    """Accept a boolean mask or an index array; return a boolean mask of length ``n``."""
    if nodes is None:
        return np.ones(n, dtype=bool)
    arr = np.asarray(nodes)
    if arr.dtype == bool:
        if arr.shape != (n,):
            raise ValueError(f"{name} mask has length {arr.shape}, expected {n}")
        mask = arr.copy()
    else:
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} index out of range [0, {n})")
        mask = np.zeros(n, dtype=bool)
        mask[arr.astype(np.int64)] = True
    if not mask.any():
        raise ValueError(f"{name} selects nothing")
    return mask


def check_is_fitted(est, attr: str = "result_"):
    """Raise sklearn's ``NotFittedError`` unless ``attr`` is set."""
    _sk_check_is_fitted(est, attributes=[attr])
