"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor` that remembers its inputs and a closure
mapping the output gradient to input gradients. ``backward`` collects the
reachable nodes into a :class:`Tape` ordered by creation and walks it in
reverse, so the graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_counter = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.value, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Parameter(Tensor):
    """A trainable leaf. ``requires_grad=False`` freezes it."""

    def __init__(self, value, name="", requires_grad=True):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=requires_grad, name=name)

    def freeze(self):
        self.requires_grad = False

    def unfreeze(self):
        self.requires_grad = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(value)


@dataclass
class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    Gradients add to whatever is already stored, so call ``zero_grad`` between steps.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    v = a.value
    return _make(v * v, (a,), lambda g: (2.0 * v * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    v = a.value
    return _make(np.log(v), (a,), lambda g: (g / v,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if slope < 0:
        raise ValueError("slope must be non-negative")
    v = x.value
    pos = v >= 0
    return _make(np.where(pos, v, slope * v), (x,), lambda g: (np.where(pos, g, slope * g),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    v = x.value
    pos = v > 0
    neg = alpha * np.expm1(np.minimum(v, 0.0))
    out = np.where(pos, v, neg)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * (neg + alpha)),))


def identity(x: Tensor) -> Tensor:
    return x


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    v = x.value
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _make(out, (x,), lambda g: (g * (1.0 - _stable_sigmoid(v)),))


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    shape = x.shape
    return _make(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_rows(x: Tensor) -> Tensor:
    """Row-wise sum of a 2-D tensor -> 1-D."""
    shape = x.shape
    return _make(x.value.sum(axis=1), (x,), lambda g: (np.broadcast_to(g[:, None], shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
            gb = av.T @ g if av.ndim == 2 else av * g
        elif av.ndim == 1:
            ga = bv @ g
            gb = np.outer(av, g)
        else:
            ga = g @ bv.T
            gb = av.T @ g
        return ga, gb

    return _make(av @ bv, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = next((t for t in tensors if t.value.size), tensors[0])
    parts = [t for t in tensors if t.value.size or t is ref]
    for t in parts:
        if t.ndim != ref.ndim or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ValueError(f"concat shape mismatch: {[p.shape for p in parts]}")
    sizes = [t.shape[axis] for t in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.value for t in parts], axis=axis)
    return _make(out, parts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D vector."""
    scalars = [as_tensor(s) for s in scalars]
    out = np.array([float(s.value) for s in scalars])
    return _make(out, scalars, lambda g: tuple(np.asarray(gi) for gi in g))


def take(x: Tensor, idx) -> Tensor:
    """Row gather ``x[idx]`` along axis 0 (indices may repeat)."""
    idx = np.asarray(idx)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- graph ops


def segment_softmax(logits: Tensor, offsets: np.ndarray) -> Tensor:
    """Softmax within contiguous segments ``logits[offsets[k]:offsets[k+1]]``.

    Empty segments contribute nothing. The per-segment max is subtracted first.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    v = logits.value
    if v.ndim != 1 or offsets[-1] != v.shape[0]:
        raise ValueError("segment_softmax expects 1-D logits covered by offsets")
    counts = np.diff(offsets)
    seg = np.repeat(np.arange(len(counts)), counts)
    starts = offsets[:-1][counts > 0]
    if v.size == 0:
        return _make(v.copy(), (logits,), lambda g: (g,))
    seg_max = np.maximum.reduceat(v, starts)
    full_max = np.empty(len(counts))
    full_max[counts > 0] = seg_max
    z = np.exp(v - full_max[seg])
    denom = np.add.reduceat(z, starts)
    full_denom = np.ones(len(counts))
    full_denom[counts > 0] = denom
    y = z / full_denom[seg]

    def bw(g):
        gy = g * y
        s = np.zeros(len(counts))
        s[counts > 0] = np.add.reduceat(gy, starts)
        return (gy - y * s[seg],)

    return _make(y, (logits,), bw)


def edge_aggregate(weights: Tensor, h: Tensor, src: np.ndarray, dst: np.ndarray, num_dst: int) -> Tensor:
    """``out[d] = sum_{e: dst[e]=d} weights[e] * h[src[e]]`` as a sparse product."""
    src = np.asarray(src)
    dst = np.asarray(dst)
    w = weights.value
    hv = h.value
    mat = sp.csr_matrix((w, (dst, src)), shape=(num_dst, hv.shape[0]))
    out = mat @ hv

    def bw(g):
        gw = np.einsum("ij,ij->i", g[dst], hv[src]) if weights.requires_grad else None
        gh = mat.T @ g if h.requires_grad else None
        return gw, gh

    return _make(out, (weights, h), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.value * keep, (x,), lambda g: (g * keep,))


def masked_cross_entropy(logits: Tensor, labels, mask) -> tuple[Tensor, Tensor]:
    """Mean softmax cross-entropy over ``mask`` plus the per-node loss vector.

    Unmasked entries of the per-node vector are zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no labeled nodes")
    v = logits.value
    n, c = v.shape
    idx = np.flatnonzero(mask)
    lab = labels[idx]
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError("label out of range for masked nodes")
    shifted = v - v.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    per_node = np.zeros(n)
    per_node[idx] = -logp[idx, lab]

    def bw(g):
        p = np.exp(logp[idx])
        p[np.arange(len(idx)), lab] -= 1.0
        out = np.zeros_like(v)
        out[idx] = p * g[idx, None]
        return (out,)

    per = _make(per_node, (logits,), bw)
    return mean(take(per, idx)), per


# ---------------------------------------------------------------- optimisation


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    """Moments and step counter for :func:`adam_step`."""

    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update; frozen params and params without grads are skipped.

    ``weight_decay`` is the L2 coefficient added to the gradient.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin stateful wrapper pairing a parameter list with an :class:`AdamState`."""

    def __init__(self, params: Sequence[Parameter], lr=0.005, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        adam_step(self.params, self.state)
