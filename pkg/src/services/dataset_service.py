"""Dataset files, split generation and the stochastic block model generator.

File formats:
    graph.txt     one "u v" pair per line, '#' lines ignored
    features.csv  "d=<int>" header, then n rows of d comma-separated decimals
    labels.csv    "node_id,label" rows
    splits.txt    "[train]", "[val]", "[test]" sections, one node id per line
"""
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import Config
from src.models.graph import (CsrMatrix, GraphDataset, LabelledNodes, SplitSpec, build_csr,
                              count_self_loops)
from src.utils.errors import ConfigError, InputError
from src.utils.rng import named_rng

logger = logging.getLogger(__name__)

SPLIT_NAMES = ('train', 'val', 'test')
GRAPH_FILE = 'graph.txt'
FEATURES_FILE = 'features.csv'
LABELS_FILE = 'labels.csv'
SPLITS_FILE = 'splits.txt'


@dataclass(frozen=True)
class SbmSpec:
    n: int
    blocks: int
    p_in: float
    p_out: float
    feature_dim: int
    feature_signal: float
    seed: int = 0

    def validate(self):
        if self.blocks < 2:
            raise ConfigError(f"SBM needs at least 2 blocks, got {self.blocks}")
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ConfigError(f"SBM requires 0 <= p_out <= p_in <= 1 (p_in={self.p_in}, p_out={self.p_out})")
        if self.n < self.blocks:
            raise ConfigError(f"SBM needs n >= blocks (n={self.n}, blocks={self.blocks})")
        if self.feature_dim < 1:
            raise ConfigError(f"feature dim must be positive, got {self.feature_dim}")


# ==================== Parsing ====================

def _read_lines(path: str) -> List[str]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read().splitlines()
    except FileNotFoundError:
        raise InputError("file not found", path=path)
    except UnicodeDecodeError:
        raise InputError("file is not valid UTF-8", path=path)


def _parse_int(token: str, what: str, path: str, lineno: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise InputError(f"{what} '{token}' is not an integer", path=path, line=lineno)
    if value < 0:
        raise InputError(f"{what} {value} is negative", path=path, line=lineno)
    return value


def read_edge_list(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Edges (m, 2) and the source line of each edge."""
    edges, lines = [], []
    for lineno, raw in enumerate(_read_lines(path), 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"expected 'u v', got '{line}'", path=path, line=lineno)
        edges.append((_parse_int(parts[0], 'node id', path, lineno),
                      _parse_int(parts[1], 'node id', path, lineno)))
        lines.append(lineno)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(lines, dtype=np.int64)


def read_features(path: str) -> np.ndarray:
    lines = _read_lines(path)
    if not lines or not lines[0].strip().startswith('d='):
        raise InputError("missing 'd=<int>' header", path=path, line=1)
    header = lines[0].strip()[2:]
    try:
        d = int(header)
    except ValueError:
        raise InputError(f"feature dimension '{header}' is not an integer", path=path, line=1)
    if d < 1:
        raise InputError(f"feature dimension must be positive, got {d}", path=path, line=1)

    rows = []
    for lineno, raw in enumerate(lines[1:], 2):
        line = raw.strip()
        if not line:
            # blank lines are only tolerated at the end of the file
            if any(l.strip() for l in lines[lineno:]):
                raise InputError("blank line inside feature rows", path=path, line=lineno)
            break
        cells = line.split(',')
        if len(cells) != d:
            raise InputError(f"expected {d} values, found {len(cells)}", path=path, line=lineno)
        try:
            rows.append([float(cell) for cell in cells])
        except ValueError:
            bad = next(cell for cell in cells if not _is_float(cell))
            raise InputError(f"non-numeric feature cell '{bad.strip()}'", path=path, line=lineno)
        if not all(math.isfinite(x) for x in rows[-1]):
            bad = next(cell for cell, x in zip(cells, rows[-1]) if not math.isfinite(x))
            raise InputError(f"non-finite feature cell '{bad.strip()}'", path=path, line=lineno)
    return np.array(rows, dtype=np.float64).reshape(-1, d)


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def read_labels(path: str) -> Tuple[Dict[int, int], Dict[int, int]]:
    """node -> label, and node -> line number."""
    labels: Dict[int, int] = {}
    where: Dict[int, int] = {}
    for lineno, raw in enumerate(_read_lines(path), 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split(',')
        if len(parts) != 2:
            raise InputError(f"expected 'node_id,label', got '{line}'", path=path, line=lineno)
        node = _parse_int(parts[0].strip(), 'node id', path, lineno)
        label = _parse_int(parts[1].strip(), 'label', path, lineno)
        if node in labels:
            raise InputError(f"node id {node} labelled twice", path=path, line=lineno)
        labels[node] = label
        where[node] = lineno
    return labels, where


def read_splits(path: str) -> Tuple[Dict[str, List[int]], Dict[int, int]]:
    """Section -> node ids, and node -> line number."""
    sections: Dict[str, List[int]] = {name: [] for name in SPLIT_NAMES}
    where: Dict[int, int] = {}
    current = None
    for lineno, raw in enumerate(_read_lines(path), 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if line.startswith('['):
            name = line[1:-1] if line.endswith(']') else None
            if name not in sections:
                raise InputError(f"unknown section '{line}'", path=path, line=lineno)
            current = name
            continue
        if current is None:
            raise InputError("node id before any [train]/[val]/[test] section", path=path, line=lineno)
        node = _parse_int(line, 'node id', path, lineno)
        if node in where:
            raise InputError(f"node id {node} appears in more than one split", path=path, line=lineno)
        sections[current].append(node)
        where[node] = lineno
    return sections, where


# ==================== Splits ====================

def make_splits(n: int, fractions: Sequence[float] = Config.SPLIT_FRACTIONS, seed: int = 0) -> SplitSpec:
    """Seeded permutation cut into consecutive slices.

    Train and val get floor(f * n); test gets the remainder when the fractions
    sum to 1, otherwise floor(f_test * n).
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be three non-negative numbers, got {tuple(fractions)}")
    total = sum(fractions)
    if total > 1.0 + 1e-9:
        raise ConfigError(f"split fractions sum to {total:g} > 1")
    perm = named_rng(seed, 'splits').permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    if abs(total - 1.0) <= 1e-9:
        n_test = n - n_train - n_val
    else:
        n_test = int(math.floor(fractions[2] * n + 1e-9))
    return SplitSpec(train=perm[:n_train], val=perm[n_train:n_train + n_val],
                     test=perm[n_train + n_val:n_train + n_val + n_test],
                     fractions=tuple(float(f) for f in fractions), seed=seed)


# ==================== Loading ====================

def _first_uncovered(edges: np.ndarray, edge_lines: np.ndarray, label_lines: Dict[int, int], rows: int,
                     graph_path: str, labels_path: Optional[str]):
    """Raise for the first node id (labels first, then edges) with no feature row."""
    for node, lineno in label_lines.items():
        if node >= rows:
            raise InputError(f"node id {node} exceeds feature rows ({rows})", path=labels_path, line=lineno)
    bad = np.flatnonzero((edges >= rows).any(axis=1))
    if len(bad):
        node = int(edges[bad[0]].max())
        raise InputError(f"node id {node} exceeds feature rows ({rows})", path=graph_path,
                         line=int(edge_lines[bad[0]]))


def _labelled_nodes(labels_map: Dict[int, int], label_lines: Dict[int, int], n: int, labels_path: str,
                    splits_path: Optional[str], fractions: Optional[Sequence[float]], seed: int) -> LabelledNodes:
    for node, lineno in label_lines.items():
        if node >= n:
            raise InputError(f"node id {node} out of range (n={n})", path=labels_path, line=lineno)
    labels = np.full(n, -1, dtype=np.int64)
    for node, label in labels_map.items():
        labels[node] = label
    c = int(labels.max()) + 1 if labels_map else 0

    if splits_path:
        sections, split_lines = read_splits(splits_path)
        for node, lineno in split_lines.items():
            if node >= n:
                raise InputError(f"unknown node id {node} in splits", path=splits_path, line=lineno)
            if labels[node] < 0:
                raise InputError(f"split node {node} has no label", path=splits_path, line=lineno)
        splits = SplitSpec(**{name: np.array(sections[name], dtype=np.int64) for name in SPLIT_NAMES})
    else:
        # generated splits partition the labelled nodes only
        labelled = np.flatnonzero(labels >= 0)
        generated = make_splits(len(labelled), fractions or Config.SPLIT_FRACTIONS, seed)
        splits = SplitSpec(train=labelled[generated.train], val=labelled[generated.val],
                           test=labelled[generated.test], fractions=generated.fractions, seed=seed)
    return LabelledNodes(labels=labels, splits=splits, c=c)


def load_labels(labels_path: str, n: int, splits_path: Optional[str] = None,
                fractions: Optional[Sequence[float]] = None, seed: int = 0) -> LabelledNodes:
    """Labels and splits for n nodes, e.g. the nodes of a token cache."""
    labels_map, label_lines = read_labels(labels_path)
    nodes = _labelled_nodes(labels_map, label_lines, n, labels_path, splits_path, fractions, seed)
    logger.info(f"Loaded labels: n={n}, c={nodes.c}, splits={nodes.splits.sizes()}")
    return nodes


def load_graph(graph_path: str, features_path: str) -> Tuple[CsrMatrix, np.ndarray]:
    """Adjacency and features; n is the feature row count."""
    edges, edge_lines = read_edge_list(graph_path)
    features = read_features(features_path)
    n = features.shape[0]
    _first_uncovered(edges, edge_lines, {}, n, graph_path, None)
    adjacency = build_csr(edges, n, line_numbers=edge_lines)
    loops = count_self_loops(edges)
    if loops:
        logger.warning(f"Dropped {loops} self-loop lines from {graph_path}")
    logger.info(f"Loaded graph: n={n}, edges={adjacency.nnz // 2}, d={features.shape[1]}")
    return adjacency, features


def load_dataset(graph_path: str, features_path: str, labels_path: str, splits_path: Optional[str] = None,
                 fractions: Optional[Sequence[float]] = None, seed: int = 0,
                 n: Optional[int] = None) -> GraphDataset:
    """Parse and cross-check the four dataset files.

    n is 1 + the largest node id in the edge and label files unless given;
    the feature file must have exactly n rows. Without a splits file the seeded
    60/20/20 (or ``fractions``) partition of the labelled nodes is generated.
    """
    edges, edge_lines = read_edge_list(graph_path)
    features = read_features(features_path)
    labels_map, label_lines = read_labels(labels_path)
    rows = features.shape[0]

    if n is None:
        max_edge = int(edges.max()) if len(edges) else -1
        max_label = max(labels_map) if labels_map else -1
        n = max(max_edge, max_label) + 1
    _first_uncovered(edges, edge_lines, label_lines, rows, graph_path, labels_path)
    if n != rows:
        raise InputError(f"row-count mismatch: n={n} but features have {rows} rows", path=features_path)

    adjacency = build_csr(edges, n, line_numbers=edge_lines)
    loops = count_self_loops(edges)
    nodes = _labelled_nodes(labels_map, label_lines, n, labels_path, splits_path, fractions, seed)
    dataset = GraphDataset(adjacency=adjacency, features=features, labels=nodes.labels, splits=nodes.splits,
                           c=nodes.c, self_loops_dropped=loops)
    isolated = int(np.count_nonzero(np.diff(adjacency.row_offsets) == 0))
    logger.info(f"Loaded dataset: n={n}, edges={adjacency.nnz // 2}, d={dataset.d}, c={nodes.c}, "
                f"splits={nodes.splits.sizes()}, self-loops dropped={loops}, isolated nodes={isolated}")
    if loops:
        logger.warning(f"Dropped {loops} self-loop lines from {graph_path}")
    return dataset


def dataset_paths(directory: str) -> Dict[str, str]:
    return {
        'graph': os.path.join(directory, GRAPH_FILE),
        'features': os.path.join(directory, FEATURES_FILE),
        'labels': os.path.join(directory, LABELS_FILE),
        'splits': os.path.join(directory, SPLITS_FILE),
    }


def write_dataset(dataset: GraphDataset, out_dir: str) -> Dict[str, str]:
    """Write the four files; floats use repr so reloading is bit-exact."""
    os.makedirs(out_dir, exist_ok=True)
    paths = dataset_paths(out_dir)

    with open(paths['graph'], 'w', encoding='utf-8') as f:
        f.write(f"# n={dataset.n}\n")
        for u, v in dataset.adjacency.edge_list():
            f.write(f"{u} {v}\n")

    with open(paths['features'], 'w', encoding='utf-8') as f:
        f.write(f"d={dataset.d}\n")
        for row in dataset.features:
            f.write(','.join(repr(float(x)) for x in row) + '\n')

    with open(paths['labels'], 'w', encoding='utf-8') as f:
        for node in np.flatnonzero(dataset.labels >= 0):
            f.write(f"{node},{dataset.labels[node]}\n")

    with open(paths['splits'], 'w', encoding='utf-8') as f:
        for name in SPLIT_NAMES:
            f.write(f"[{name}]\n")
            for node in dataset.splits.get(name):
                f.write(f"{node}\n")

    logger.info(f"Wrote dataset files to {out_dir}")
    return paths


# ==================== Stochastic block model ====================

def _bernoulli_positions(rng: np.random.Generator, total: int, p: float) -> np.ndarray:
    """Indices in [0, total) kept by independent Bernoulli(p) trials.

    Gaps between successes are geometric, so the draw costs O(successes).
    """
    if p <= 0.0 or total == 0:
        return np.empty(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(total, dtype=np.int64)
    chunks = []
    position = -1
    batch = max(16, int(total * p * 1.1) + 16)
    while True:
        gaps = rng.geometric(p, size=batch)
        steps = position + np.cumsum(gaps)
        inside = steps[steps < total]
        chunks.append(inside)
        if len(inside) < len(steps):
            break
        position = int(steps[-1])
    return np.concatenate(chunks).astype(np.int64)


def generate_sbm(spec: SbmSpec) -> GraphDataset:
    """Round-robin block assignment, Bernoulli edges, Gaussian block features."""
    spec.validate()
    n, blocks = spec.n, spec.blocks
    block_of = np.arange(n) % blocks
    members = [np.arange(b, n, blocks) for b in range(blocks)]
    edge_rng = named_rng(spec.seed, 'sbm/edges')

    pieces = []
    for a in range(blocks):
        for b in range(a, blocks):
            ma, mb = len(members[a]), len(members[b])
            p = spec.p_in if a == b else spec.p_out
            hits = _bernoulli_positions(edge_rng, ma * mb, p)
            i, j = hits // mb, hits % mb
            if a == b:
                # cells of the full grid with i < j are the unordered pairs
                keep = i < j
                i, j = i[keep], j[keep]
            pieces.append(np.stack([members[a][i], members[b][j]], axis=1))
    edges = np.concatenate(pieces) if pieces else np.empty((0, 2), dtype=np.int64)
    adjacency = build_csr(edges, n)

    means = np.zeros((blocks, spec.feature_dim))
    means[np.arange(blocks), np.arange(blocks) % spec.feature_dim] = spec.feature_signal
    noise = named_rng(spec.seed, 'sbm/features').standard_normal((n, spec.feature_dim))
    features = means[block_of] + noise

    splits = make_splits(n, Config.SPLIT_FRACTIONS, spec.seed)
    dataset = GraphDataset(adjacency=adjacency, features=features, labels=block_of, splits=splits, c=blocks)
    logger.info(f"Generated SBM: n={n}, blocks={blocks}, edges={adjacency.nnz // 2}, "
                f"p_in={spec.p_in}, p_out={spec.p_out}, seed={spec.seed}")
    return dataset
