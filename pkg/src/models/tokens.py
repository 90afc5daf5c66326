"""Per-node hop token sequences produced by Hop2Token."""
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import CacheIntegrityError, InternalError

NORM_SYM = 0


def input_hash(adj, features: np.ndarray, K: int, s: int) -> bytes:
    """SHA-256 over the canonical edge list, feature bytes, K and s.

    Edges are the upper-triangle (u, v) pairs as int64 LE, features fp64 LE
    row-major, K and s u32 LE.
    """
    h = hashlib.sha256()
    h.update(adj.edge_list().astype('<i8').tobytes())
    h.update(np.ascontiguousarray(features, dtype='<f8').tobytes())
    h.update(struct.pack('<I', K))
    h.update(struct.pack('<I', s))
    return h.digest()


@dataclass(frozen=True)
class TokenMeta:
    """Provenance header stored alongside the tokens."""
    K: int
    s: int
    norm_tag: int
    input_hash: bytes


@dataclass
class BatchViewStats:
    """Counts what batch_view gathered, so tests can assert batch-sized access."""
    calls: int = 0
    rows_gathered: int = 0
    max_rows: int = 0
    bytes_gathered: int = 0

    def record(self, rows: int, nbytes: int):
        self.calls += 1
        self.rows_gathered += rows
        self.max_rows = max(self.max_rows, rows)
        self.bytes_gathered += nbytes


@dataclass(frozen=True)
class TokenTensor:
    """X_G with shape (n, K+1, d') in fp64, row-major [node][hop][feature]."""
    data: np.ndarray
    meta: TokenMeta
    stats: BatchViewStats = field(default_factory=BatchViewStats, compare=False, repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[1] != self.meta.K + 1:
            raise InternalError(f"token data shape {data.shape} does not match K={self.meta.K}")
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def K(self) -> int:
        return self.meta.K

    @property
    def d_prime(self) -> int:
        return self.data.shape[2]

    def hop(self, k: int) -> np.ndarray:
        """The n × d' slice for hop k."""
        return self.data[:, k, :]

    def batch_view(self, node_ids) -> np.ndarray:
        """Gather sequences for ``node_ids`` in order; the result is read-only."""
        ids = np.asarray(node_ids, dtype=np.int64).reshape(-1)
        if len(ids) and (ids.min() < 0 or ids.max() >= self.n):
            bad = int(ids[(ids < 0) | (ids >= self.n)][0])
            raise InternalError(f"batch node id {bad} outside [0, {self.n})")
        batch = self.data[ids]
        batch.setflags(write=False)
        self.stats.record(len(ids), batch.nbytes)
        return batch

    def verify(self, adj_norm, X_fused: np.ndarray, s: int = None):
        """Raise CacheIntegrityError unless the header hash matches these inputs."""
        s = self.meta.s if s is None else s
        expected = input_hash(adj_norm, X_fused, self.K, s)
        if expected != self.meta.input_hash:
            raise CacheIntegrityError(
                f"token cache hash {self.meta.input_hash.hex()[:16]} does not match "
                f"inputs {expected.hex()[:16]}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenTensor):
            return NotImplemented
        return self.meta == other.meta and self.data.shape == other.data.shape \
            and self.data.tobytes() == other.data.tobytes()

    __hash__ = None
