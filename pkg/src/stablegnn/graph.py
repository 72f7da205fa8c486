"""Graph containers, file loaders and synthetic generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Raised when an input file does not parse; the message carries the line number."""


def _csr(num_rows: int, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    counts = np.bincount(rows, minlength=num_rows)
    offsets = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, cols.astype(np.int64)


@dataclass(frozen=True, eq=False)
class MessageEdges:
    """Edge list in CSR order: for target ``dst[e]`` the message comes from ``src[e]``."""

    num_nodes: int
    offsets: np.ndarray
    src: np.ndarray
    dst: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph with symmetric CSR adjacency.

    ``attributes`` maps a column name to a per-node array of categorical strings.
    """

    num_nodes: int
    offsets: np.ndarray
    neighbors: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    attributes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.offsets) != self.num_nodes + 1 or np.any(np.diff(self.offsets) < 0):
            raise ValueError("csr offsets must have length N+1 and be non-decreasing")
        if self.neighbors.size and (self.neighbors.min() < 0 or self.neighbors.max() >= self.num_nodes):
            raise ValueError("neighbor index out of range")
        if self.features.shape[0] != self.num_nodes or self.labels.shape[0] != self.num_nodes:
            raise ValueError("features/labels row count must equal num_nodes")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class ids")

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels, attributes=None) -> "Graph":
        """Symmetrise and deduplicate an edge array of shape (E, 2)."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        both = np.concatenate([edges, edges[:, ::-1]])
        both = np.unique(both, axis=0) if both.size else both
        offsets, nbrs = _csr(num_nodes, both[:, 0], both[:, 1])
        return cls(num_nodes, offsets, nbrs, features, labels, dict(attributes or {}))

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def num_edges(self) -> int:
        """Stored (directed) adjacency entries."""
        return len(self.neighbors)

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neighbors[self.offsets[i]:self.offsets[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edge_array(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        return np.stack([rows, self.neighbors], axis=1)

    @cached_property
    def message_edges(self) -> MessageEdges:
        """CSR edges with exactly one self-loop per node, grouped by target node."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        keep = rows != self.neighbors
        loops = np.arange(self.num_nodes)
        rows = np.concatenate([rows[keep], loops])
        cols = np.concatenate([self.neighbors[keep], loops])
        offsets, src = _csr(self.num_nodes, rows, cols)
        dst = np.repeat(np.arange(self.num_nodes), np.diff(offsets))
        return MessageEdges(self.num_nodes, offsets, src, dst)


@dataclass(eq=False)
class BipartiteGraph:
    """User-item interactions, each tagged with an environment (e.g. day).

    ``user_ids`` / ``item_ids`` map dense indices back to the ids of the source
    file when the graph was loaded from disk.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    env_tags: np.ndarray
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.env_tags = np.asarray(self.env_tags, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.env_tags)):
            raise ValueError("interaction columns must have equal length")
        if self.users.size:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user id out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item id out of range")
        for name, col in self.attributes.items():
            if len(col) != self.num_users:
                raise ValueError(f"attribute {name!r} must have one value per user")

    @property
    def num_interactions(self) -> int:
        return len(self.users)

    @property
    def tags(self) -> list[int]:
        return sorted(set(self.env_tags.tolist()))

    def select(self, tags) -> "BipartiteGraph":
        """Interactions whose tag is in ``tags``; id spaces are kept."""
        tags = [tags] if np.isscalar(tags) else list(tags)
        keep = np.isin(self.env_tags, tags)
        return BipartiteGraph(self.num_users, self.num_items, self.users[keep], self.items[keep],
                              self.env_tags[keep], self.attributes, self.user_ids, self.item_ids)

    def user_csr(self) -> tuple[np.ndarray, np.ndarray]:
        return _csr(self.num_users, self.users, self.items)

    def item_csr(self) -> tuple[np.ndarray, np.ndarray]:
        return _csr(self.num_items, self.items, self.users)

    def user_items(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in zip(self.users.tolist(), self.items.tolist()):
            out[u].add(i)
        return out

    def dedup(self) -> "BipartiteGraph":
        """Collapse repeated (user, item, tag) triples."""
        if not self.num_interactions:
            return self
        order = np.lexsort((self.env_tags, self.items, self.users))
        u, i, t = self.users[order], self.items[order], self.env_tags[order]
        first = np.ones(len(u), dtype=bool)
        first[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1]) | (t[1:] != t[:-1])
        return BipartiteGraph(self.num_users, self.num_items, u[first], i[first], t[first], self.attributes,
                              self.user_ids, self.item_ids)


# ---------------------------------------------------------------- loaders


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _ints(path, lineno, parts, n):
    if len(parts) != n:
        raise GraphFormatError(f"{path}:{lineno}: expected {n} tab-separated fields, got {len(parts)}")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise GraphFormatError(f"{path}:{lineno}: non-integer field") from exc


def load_features(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: non-numeric feature") from exc
            if len(rows[-1]) != len(rows[0]):
                raise GraphFormatError(f"{path}:{lineno}: ragged feature row")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def load_attributes(path, num_rows: int | None = None) -> dict[str, np.ndarray]:
    """CSV with header ``node_id,<col>,...``; every id in ``[0, num_rows)`` must appear."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "node_id":
            raise GraphFormatError(f"{path}:1: header must start with node_id")
        names = [h.strip() for h in header[1:]]
        records = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise GraphFormatError(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                nid = int(row[0])
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node_id") from exc
            records[nid] = [c.strip() for c in row[1:]]
    n = num_rows if num_rows is not None else (max(records) + 1 if records else 0)
    missing = [i for i in range(n) if i not in records]
    if missing:
        raise GraphFormatError(f"{path}: no attribute row for node {missing[0]}")
    if any(i >= n or i < 0 for i in records):
        raise GraphFormatError(f"{path}: node_id out of range")
    return {name: np.array([records[i][k] for i in range(n)], dtype=object) for k, name in enumerate(names)}


def load_graph(edges_path, features_path, labels_path, attrs_path=None) -> Graph:
    """Read the tab/CSV text formats into a :class:`Graph` with symmetric CSR."""
    features = load_features(features_path)
    n = features.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    for lineno, line in _data_lines(labels_path):
        nid, lab = _ints(labels_path, lineno, line.split("\t"), 2)
        if not 0 <= nid < n:
            raise GraphFormatError(f"{labels_path}:{lineno}: dangling node id {nid}")
        labels[nid] = lab
    if np.any(labels < 0):
        raise GraphFormatError(f"{labels_path}: label count does not match {n} feature rows")
    edges = []
    for lineno, line in _data_lines(edges_path):
        a, b = _ints(edges_path, lineno, line.split("\t"), 2)
        if not (0 <= a < n and 0 <= b < n):
            raise GraphFormatError(f"{edges_path}:{lineno}: dangling node id")
        edges.append((a, b))
    attrs = load_attributes(attrs_path, n) if attrs_path else {}
    return Graph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, attrs)


def load_interactions(path, attrs_path=None) -> BipartiteGraph:
    """Read ``user<TAB>item<TAB>env_tag`` lines; user and item ids are densified in sorted order."""
    rows = []
    for lineno, line in _data_lines(path):
        rows.append(_ints(path, lineno, line.split("\t"), 3))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    user_ids, users = np.unique(arr[:, 0], return_inverse=True)
    item_ids, items = np.unique(arr[:, 1], return_inverse=True)
    attrs = {}
    if attrs_path:
        raw = load_attributes(attrs_path)
        for name, col in raw.items():
            if user_ids.size and user_ids.max() >= len(col):
                raise GraphFormatError(f"{attrs_path}: missing attributes for user {user_ids.max()}")
            attrs[name] = col[user_ids]
    return BipartiteGraph(len(user_ids), len(item_ids), users, items, arr[:, 2], attrs, user_ids, item_ids)


def save_graph(graph: Graph, edges_path, features_path, labels_path, attrs_path=None) -> None:
    with open(edges_path, "w", encoding="utf-8") as fh:
        for a, b in graph.edge_array():
            if a < b:
                fh.write(f"{a}\t{b}\n")
    np.savetxt(features_path, graph.features, delimiter=",", fmt="%.17g")
    with open(labels_path, "w", encoding="utf-8") as fh:
        for i, y in enumerate(graph.labels):
            fh.write(f"{i}\t{y}\n")
    if attrs_path:
        _write_attrs(attrs_path, graph.attributes, graph.num_nodes)


def save_interactions(bip: BipartiteGraph, path, attrs_path=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in zip(bip.users, bip.items, bip.env_tags):
            fh.write(f"{u}\t{i}\t{t}\n")
    if attrs_path:
        _write_attrs(attrs_path, bip.attributes, bip.num_users)


def _write_attrs(path, attributes, n):
    names = sorted(attributes)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", *names])
        for i in range(n):
            w.writerow([i, *(attributes[k][i] for k in names)])


# ---------------------------------------------------------------- synthetic data


def generate_synthetic(num_nodes=2000, num_classes=2, feature_dim=16, intra_edge_prob=0.02,
                       inter_edge_prob=0.002, class_signal=1.0, seed=0) -> Graph:
    """Stochastic block model with Gaussian class-mean features.

    Each class gets a random mean direction scaled to ``class_signal``; features add
    unit Gaussian noise. ``gender`` and ``age_group`` attributes lean towards one
    value for the upper half of the classes so attribute selection shifts the labels.
    """
    for p in (intra_edge_prob, inter_edge_prob):
        if not 0.0 <= p <= 1.0:
            raise ValueError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % num_classes)
    iu, ju = np.triu_indices(num_nodes, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, intra_edge_prob, inter_edge_prob)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    means = rng.standard_normal((num_classes, feature_dim))
    means *= class_signal / np.linalg.norm(means, axis=1, keepdims=True)
    features = means[labels] + rng.standard_normal((num_nodes, feature_dim))

    upper = labels >= (num_classes + 1) // 2 if num_classes > 1 else np.ones(num_nodes, bool)
    gender = np.where(rng.random(num_nodes) < np.where(upper, 0.8, 0.2), "M", "F").astype(object)
    age = np.where(rng.random(num_nodes) < np.where(upper, 0.7, 0.3), "<=25", ">25").astype(object)
    return Graph.from_edges(num_nodes, edges, features, labels, {"gender": gender, "age_group": age})


def generate_synthetic_bipartite(num_users=500, num_items=800, num_days=5, per_user_per_day=20,
                                 latent_dim=8, group_shift=3.0, temperature=1.0, seed=0) -> BipartiteGraph:
    """Latent-factor interaction log whose preferences depend on the user's group.

    Users carry ``gender`` (M/F) and ``age_group`` attributes; the gender group
    shifts the user's latent taste so the two groups favour different items.
    Each user draws ``per_user_per_day`` distinct items per day from a softmax
    over affinities. Every user and item is touched on day 1.
    """
    rng = np.random.default_rng(seed)
    gender = np.where(rng.random(num_users) < 0.5, "M", "F").astype(object)
    age = np.where(rng.random(num_users) < 0.5, "<=25", ">25").astype(object)
    group_dir = rng.standard_normal(latent_dim)
    group_dir /= np.linalg.norm(group_dir)
    sign = np.where(gender == "M", 1.0, -1.0)
    user_lat = rng.standard_normal((num_users, latent_dim)) * 0.7 + group_shift * sign[:, None] * group_dir
    item_lat = rng.standard_normal((num_items, latent_dim))
    popularity = rng.normal(0.0, 0.5, num_items)
    logits = (user_lat @ item_lat.T) / np.sqrt(latent_dim) / temperature + popularity
    logits -= logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)

    users, items, tags = [], [], []
    for day in range(1, num_days + 1):
        for u in range(num_users):
            chosen = rng.choice(num_items, size=per_user_per_day, replace=False, p=prob[u])
            users.append(np.full(per_user_per_day, u))
            items.append(chosen)
            tags.append(np.full(per_user_per_day, day))
    users = np.concatenate(users)
    items = np.concatenate(items)
    tags = np.concatenate(tags)
    # every item needs a day-1 interaction
    day1_items = set(items[tags == 1].tolist())
    missing = [i for i in range(num_items) if i not in day1_items]
    if missing:
        extra_users = rng.integers(0, num_users, len(missing))
        users = np.concatenate([users, extra_users])
        items = np.concatenate([items, np.array(missing)])
        tags = np.concatenate([tags, np.ones(len(missing), dtype=np.int64)])
    bip = BipartiteGraph(num_users, num_items, users, items, tags, {"gender": gender, "age_group": age})
    return bip.dedup()
