import numpy as np
import pytest

from stablegnn.autodiff import Parameter


def numeric_grad(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_grads(build, params: list[Parameter], step: float = 1e-3) -> float:
    """Largest relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    build().backward()
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(build().value), p.value, step)
        ana = p.grad if p.grad is not None else np.zeros_like(p.value)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_graph(rng: np.random.Generator, n: int, p: float = 0.3, feature_dim: int = 3, num_classes: int = 2):
    """Small Erdos-Renyi graph with Gaussian features (isolated nodes allowed)."""
    from stablegnn.graph import Graph

    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = list(zip(iu[0][keep].tolist(), iu[1][keep].tolist()))
    labels = rng.integers(0, num_classes, n)
    labels[:num_classes] = np.arange(num_classes)[: min(n, num_classes)]
    return Graph.from_edges(n, edges, rng.normal(size=(n, feature_dim)), labels)


def dense_alpha(graph, weights: np.ndarray) -> np.ndarray:
    """Dense N x N matrix with ``A[i, j]`` = weight of edge j -> i (self-loops included)."""
    me = graph.message_edges
    A = np.zeros((graph.num_nodes, graph.num_nodes))
    A[me.dst, me.src] = weights
    return A


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, from the ``criterion`` user property."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and (rep.when == "call" or outcome == "skipped"):
                lines.append((props["criterion"], outcome.upper(), props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, outcome, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:>2}: {outcome:<7} {detail}")
