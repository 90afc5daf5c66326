"""Shared fixtures and graph builders for the test suite."""
import os

# Set up test environment before src.config is imported
os.environ.setdefault('NAG_ENV', 'testing')

import numpy as np
import pytest

from src.models.graph import GraphDataset, SplitSpec, build_csr
from src.services.dataset_service import SbmSpec, generate_sbm


def er_edges(n: int, p: float, seed: int) -> np.ndarray:
    """Erdős-Rényi G(n, p) edge list (u < v)."""
    rng = np.random.default_rng(seed)
    return np.argwhere(np.triu(rng.random((n, n)) < p, k=1))


def er_graph(n: int, p: float, seed: int):
    return build_csr(er_edges(n, p, seed), n)


def is_symmetric(adj) -> bool:
    m = adj.to_scipy()
    diff = m - m.T
    return diff.nnz == 0 or not np.any(diff.data)


def connected_graph(n: int, p: float, seed: int):
    """ER graph plus a ring, so every node has degree >= 2 and there is one component."""
    ring = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return build_csr(np.concatenate([ring, er_edges(n, p, seed)]), n)


def separable_dataset(n: int = 20, d: int = 4, seed: int = 0) -> GraphDataset:
    """Two classes split by the sign of feature 0, edges only within a class.

    Splits are a seeded 12/4/4 partition.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    features = rng.normal(scale=0.1, size=(n, d))
    features[:, 0] += np.where(labels == 1, 2.0, -2.0)
    same = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j] and j - i <= 4]
    adjacency = build_csr(np.array(same), n)
    order = rng.permutation(n)
    splits = SplitSpec(train=order[:12], val=order[12:16], test=order[16:])
    return GraphDataset(adjacency=adjacency, features=features, labels=labels, splits=splits, c=2)


@pytest.fixture
def triangle():
    return build_csr([(0, 1), (1, 2), (0, 2)], 3)


@pytest.fixture
def star():
    return build_csr([(0, 1), (0, 2), (0, 3), (0, 4)], 5)


@pytest.fixture
def toy_dataset():
    return separable_dataset()


@pytest.fixture
def small_sbm():
    return generate_sbm(SbmSpec(n=60, blocks=3, p_in=0.3, p_out=0.02, feature_dim=6, feature_signal=1.5, seed=3))
