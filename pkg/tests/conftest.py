import numpy as np
import pytest

from grbench.data import SplitConfig, degree_split, synthetic_dataset
from grbench.graph import GraphBundle
from grbench.models import ModelSpec
from grbench.training import TrainConfig, train


def random_graph(n, p, d=4, num_classes=3, seed=0, name="random"):
    rng = np.random.default_rng(seed)
    a = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(a)
    feats = rng.normal(size=(n, d)).astype(np.float32)
    labels = rng.integers(0, num_classes, n)
    return GraphBundle.from_edges(n, edges, feats, labels, num_classes, name=name)


def path_graph(n=3, d=2):
    edges = [(i, i + 1) for i in range(n - 1)]
    return GraphBundle.from_edges(n, edges, np.zeros((n, d), np.float32), np.zeros(n, np.int64), 2)


def two_clusters(size=10, d=4, seed=0):
    """Two dense, well-separated communities with class-coded features."""
    rng = np.random.default_rng(seed)
    n = 2 * size
    labels = np.repeat([0, 1], size)
    edges = []
    for c in range(2):
        nodes = np.arange(c * size, (c + 1) * size)
        for i in nodes:
            for j in nodes:
                if i < j and rng.random() < 0.5:
                    edges.append((i, j))
    edges.append((size - 1, size))
    feats = rng.normal(size=(n, d)) * 0.3
    feats[:, 0] += np.where(labels == 0, 1.0, -1.0)
    return GraphBundle.from_edges(n, edges, feats.astype(np.float32), labels, 2, name="two-clusters")


@pytest.fixture(scope="session")
def toy():
    return synthetic_dataset("toy")


@pytest.fixture(scope="session")
def toy_split(toy):
    return degree_split(toy, SplitConfig(seed=0))


@pytest.fixture(scope="session")
def toy_surrogate(toy, toy_split):
    return train(ModelSpec.default("GCN"), toy, toy_split, TrainConfig(seed=1, max_epochs=200))


@pytest.fixture(scope="session")
def toy_defender(toy, toy_split):
    return train(ModelSpec.default("GCN", True), toy, toy_split, TrainConfig(seed=2, max_epochs=200))


# acceptance report ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, status: str, detail: str) -> None:
    line = f"{criterion:<4} {status:<4} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:].split()[0])):
            terminalreporter.write_line(line)
