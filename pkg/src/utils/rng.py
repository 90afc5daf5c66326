"""Named, seeded random streams.

Every consumer of randomness asks for a stream by name. The stream is derived
from ``SeedSequence(seed, spawn_key=(crc32(name),))`` so that two streams with
different names never share state and adding a new stream never shifts an
existing one. There is no global PRNG anywhere in the package.

Stream names in use:
    ``init/<leaf name>``   parameter initialisation, one per ParamLeaf
    ``shuffle``            per-epoch permutation of the train split
    ``splits``             make_splits permutation
    ``sbm/edges``          SBM edge sampling
    ``sbm/features``       SBM Gaussian features
    ``lanczos/v0``         starting vector of the sparse eigensolver
    ``gradcheck``          subsampling of parameter indices
    ``gradcheck/problem``  graph, features, batch and targets of the check problem
"""
import zlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name."""
    return zlib.crc32(name.encode('utf-8')) & 0xFFFFFFFF


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Return a fresh generator for ``(seed, name)``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.PCG64(seq))
