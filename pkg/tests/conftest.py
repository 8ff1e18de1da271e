import numpy as np
import pytest

from posegnn.graph import Graph


def dense_propagation(g: Graph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 built explicitly; test-only oracle."""
    a = np.eye(g.n)
    for i, nb in enumerate(g.neighbors):
        for j in nb:
            a[i, j] = 1.0
    d = a.sum(axis=1)
    dinv = np.diag(1.0 / np.sqrt(d))
    return dinv @ a @ dinv


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4) -> Graph:
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return Graph.from_edges(n, edges)


def brute_knn(x: np.ndarray, k: int) -> list[list[int]]:
    """All-pairs squared-distance sort with lower-index tie-break; test-only oracle."""
    n = x.shape[0]
    out = []
    for i in range(n):
        dists = []
        for j in range(n):
            if j == i:
                continue
            s = 0.0
            for c in range(x.shape[1]):
                s += (x[i, c] - x[j, c]) ** 2
            dists.append((s, j))
        dists.sort()
        out.append([j for _, j in dists[:k]])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
