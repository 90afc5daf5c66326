"""Graph representation: canonical CSR adjacency and the attributed dataset."""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from src.utils.errors import InputError, InternalError

logger = logging.getLogger(__name__)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CsrMatrix:
    """Row-compressed sparse matrix in canonical form.

    Column indices within a row are strictly increasing and unique. Arrays are
    read-only after construction.
    """
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'row_offsets', _frozen(np.asarray(self.row_offsets, dtype=np.int64)))
        object.__setattr__(self, 'col_indices', _frozen(np.asarray(self.col_indices, dtype=np.int64)))
        object.__setattr__(self, 'values', _frozen(np.asarray(self.values, dtype=np.float64)))
        self._check()

    def _check(self):
        ro, ci = self.row_offsets, self.col_indices
        if ro.shape != (self.n_rows + 1,) or ro[0] != 0 or ro[-1] != len(ci):
            raise InternalError("CSR row_offsets inconsistent with col_indices")
        if len(self.values) != len(ci):
            raise InternalError("CSR values and col_indices differ in length")
        if np.any(np.diff(ro) < 0):
            raise InternalError("CSR row_offsets must be nondecreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise InternalError("CSR column index out of range")
        # strictly increasing within each row: a step that is not a row start must increase
        if len(ci) > 1:
            steps = np.diff(ci)
            row_starts = np.zeros(len(ci), dtype=bool)
            row_starts[ro[:-1][ro[:-1] < len(ci)]] = True
            if np.any((steps <= 0) & ~row_starts[1:]):
                raise InternalError("CSR columns must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return len(self.col_indices)

    @classmethod
    def from_scipy(cls, m: sp.spmatrix) -> 'CsrMatrix':
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    def to_scipy(self) -> sp.csr_matrix:
        """Return a scipy view (shares the read-only buffers)."""
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                             shape=(self.n_rows, self.n_cols), copy=False)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets))

    def edge_list(self) -> np.ndarray:
        """Sorted (u, v) pairs with u < v, shape (m, 2)."""
        rows = self.row_ids()
        mask = rows < self.col_indices
        return np.stack([rows[mask], self.col_indices[mask]], axis=1)


def build_csr(edges, n: int, line_numbers: Optional[np.ndarray] = None) -> CsrMatrix:
    """Canonical symmetric adjacency (value 1.0 per undirected edge).

    Self-loops are dropped and duplicate pairs in either orientation merged.
    ``line_numbers`` maps each edge to its source line for error messages.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        bad = np.flatnonzero((edges < 0).any(axis=1) | (edges >= n).any(axis=1))
        if len(bad):
            i = int(bad[0])
            node = int(edges[i][(edges[i] < 0) | (edges[i] >= n)][0])
            line = int(line_numbers[i]) if line_numbers is not None else None
            raise InputError(f"node id {node} out of range", line=line)

    u, v = edges[:, 0], edges[:, 1]
    keep = u != v
    u, v = u[keep], v[keep]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    m = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    m.data[:] = 1.0
    return CsrMatrix(n, n, m.indptr, m.indices, m.data)


def count_self_loops(edges) -> int:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return int(np.count_nonzero(edges[:, 0] == edges[:, 1]))


def degrees(adj: CsrMatrix) -> np.ndarray:
    """Row sums."""
    return np.bincount(adj.row_ids(), weights=adj.values, minlength=adj.n_rows).astype(np.float64)


def inv_sqrt_degrees(adj: CsrMatrix) -> np.ndarray:
    """D^(-1/2) diagonal with 0 for degree-0 nodes."""
    deg = degrees(adj)
    out = np.zeros_like(deg)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def normalize_sym(adj: CsrMatrix) -> CsrMatrix:
    """Â = D^(-1/2) A D^(-1/2), isolated nodes keep all-zero rows.

    Each unordered pair is evaluated once and mirrored so the result is
    exactly symmetric.
    """
    deg = degrees(adj)
    rows = adj.row_ids()
    cols = adj.col_indices
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    # same expression, same operand order for (i,j) and (j,i)
    vals = adj.values / np.sqrt(deg[lo] * deg[hi])
    isolated = int(np.count_nonzero(deg == 0))
    if isolated:
        logger.debug(f"normalize_sym: {isolated} isolated nodes keep zero rows")
    return CsrMatrix(adj.n_rows, adj.n_cols, adj.row_offsets, cols, vals)


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test node index sets, optionally with how they were made."""
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    fractions: Optional[Tuple[float, float, float]] = None
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ('train', 'val', 'test'):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))

    def get(self, name: str) -> np.ndarray:
        if name not in ('train', 'val', 'test'):
            raise InternalError(f"unknown split '{name}'")
        return getattr(self, name)

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def _check_splits(labels: np.ndarray, splits: SplitSpec, c: int, n: int):
    seen = set()
    for name in ('train', 'val', 'test'):
        ids = splits.get(name)
        if len(ids) and (ids.min() < 0 or ids.max() >= n):
            raise InternalError(f"{name} split references a node outside [0, {n})")
        overlap = seen.intersection(ids.tolist())
        if overlap:
            raise InternalError(f"{name} split overlaps another split at node {min(overlap)}")
        seen.update(ids.tolist())
        if len(ids) and (labels[ids].min() < 0 or labels[ids].max() >= c):
            raise InternalError(f"{name} split references an unlabeled node")


@dataclass(frozen=True)
class LabelledNodes:
    """Labels and splits without the graph, enough to train on cached tokens.

    ``labels`` uses -1 for nodes without a label; every node referenced by a
    split carries a class id in [0, c).
    """
    labels: np.ndarray
    splits: SplitSpec
    c: int

    def __post_init__(self):
        object.__setattr__(self, 'labels', _frozen(np.asarray(self.labels, dtype=np.int64)))
        if self.labels.ndim != 1:
            raise InternalError(f"labels must be one-dimensional, got shape {self.labels.shape}")
        _check_splits(self.labels, self.splits, self.c, len(self.labels))

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class GraphDataset:
    """Attributed graph with labels and splits (same label rules as LabelledNodes)."""
    adjacency: CsrMatrix
    features: np.ndarray
    labels: np.ndarray
    splits: SplitSpec
    c: int
    self_loops_dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'features', _frozen(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(self, 'labels', _frozen(np.asarray(self.labels, dtype=np.int64)))
        n = self.adjacency.n_rows
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InternalError(f"features have {self.features.shape[0]} rows, graph has {n} nodes")
        if self.labels.shape != (n,):
            raise InternalError(f"labels have length {len(self.labels)}, graph has {n} nodes")
        _check_splits(self.labels, self.splits, self.c, n)

    @property
    def n(self) -> int:
        return self.adjacency.n_rows

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def nodes(self) -> LabelledNodes:
        return LabelledNodes(labels=self.labels, splits=self.splits, c=self.c)
