"""Hop2Token propagation and the binary token cache.

Cache layout (little-endian)::

    magic      4s   b"NAGT"
    version    u32  1
    n          u64
    K          u32
    d_prime    u32
    s          u32
    norm_tag   u8   0 = symmetric normalisation
    reserved   3x
    input_hash 32s  SHA-256, see input_hash()
    payload    n*(K+1)*d_prime fp64, [node][hop][feature]
"""
import logging
import os
import struct

import numpy as np

from src.models.graph import CsrMatrix, normalize_sym
from src.models.tokens import NORM_SYM, TokenMeta, TokenTensor, input_hash
from src.services.spectral_service import fuse_features, laplacian_eigs
from src.utils.errors import (CacheError, CacheIntegrityError, CacheVersionError, ConfigError,
                              InternalError, NotATokenCache, TruncatedCache)

logger = logging.getLogger(__name__)

CACHE_MAGIC = b'NAGT'
CACHE_VERSION = 1
HEADER = struct.Struct('<4sIQIIIB3x32s')
MAX_HOPS = 32


def propagate(adj_norm: CsrMatrix, X_fused: np.ndarray, K: int, s: int = 0) -> TokenTensor:
    """Build X_G: slice k holds Â^k X', computed by K successive sparse products."""
    if not 1 <= K <= MAX_HOPS:
        raise ConfigError(f"K={K} outside the supported range 1..{MAX_HOPS}")
    X = np.ascontiguousarray(X_fused, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != adj_norm.n_rows:
        raise InternalError(f"feature matrix {X.shape} does not match {adj_norm.n_rows} nodes")

    n, d = X.shape
    data = np.empty((n, K + 1, d), dtype=np.float64)
    data[:, 0, :] = X
    a_hat = adj_norm.to_scipy()
    current = X
    for k in range(1, K + 1):
        # CSR product accumulates each row in stored column order
        current = np.asarray(a_hat @ current)
        data[:, k, :] = current
        logger.debug(f"propagate: hop {k}/{K} done")

    meta = TokenMeta(K=K, s=s, norm_tag=NORM_SYM, input_hash=input_hash(adj_norm, X, K, s))
    logger.info(f"Propagated {n} nodes over {K} hops (d'={d})")
    return TokenTensor(data=data, meta=meta)


class TokenCache:
    """Reads and writes token tensors in the NAGT format."""

    def write(self, tokens: TokenTensor, path: str):
        header = HEADER.pack(CACHE_MAGIC, CACHE_VERSION, tokens.n, tokens.K, tokens.d_prime,
                             tokens.meta.s, tokens.meta.norm_tag, tokens.meta.input_hash)
        tmp = f"{path}.tmp"
        with open(tmp, 'wb') as f:
            f.write(header)
            f.write(tokens.data.astype('<f8', copy=False).tobytes())
        os.replace(tmp, path)
        logger.info(f"Wrote token cache {path} (n={tokens.n}, K={tokens.K}, d'={tokens.d_prime})")

    def read(self, path: str) -> TokenTensor:
        if not os.path.exists(path):
            raise CacheError(f"token cache not found: {path}")
        with open(path, 'rb') as f:
            raw = f.read()
        if len(raw) < 4 or raw[:4] != CACHE_MAGIC:
            raise NotATokenCache(f"{path}: not a token cache")
        if len(raw) < HEADER.size:
            raise TruncatedCache(f"{path}: truncated cache header")
        magic, version, n, K, d_prime, s, norm_tag, digest = HEADER.unpack_from(raw, 0)
        if version != CACHE_VERSION:
            raise CacheVersionError(f"{path}: token cache version {version}, expected {CACHE_VERSION}")
        count = n * (K + 1) * d_prime
        payload = len(raw) - HEADER.size
        if payload < count * 8:
            raise TruncatedCache(
                f"{path}: truncated cache (header declares n={n}, K={K}, d'={d_prime}: "
                f"{count * 8} payload bytes, found {payload})")
        if payload > count * 8:
            raise CacheIntegrityError(f"{path}: {payload - count * 8} trailing bytes after payload")
        data = np.frombuffer(raw, dtype='<f8', count=count, offset=HEADER.size)
        data = data.astype(np.float64).reshape(n, K + 1, d_prime)
        meta = TokenMeta(K=K, s=s, norm_tag=norm_tag, input_hash=digest)
        return TokenTensor(data=data, meta=meta)


token_cache = TokenCache()


def write_cache(tokens: TokenTensor, path: str):
    token_cache.write(tokens, path)


def read_cache(path: str) -> TokenTensor:
    return token_cache.read(path)


def build_tokens(adjacency: CsrMatrix, features: np.ndarray, K: int, s: int, structural: bool = True,
                 solver: str = 'auto') -> TokenTensor:
    """normalize_sym, then the Laplacian encoding (if structural), fuse and propagate."""
    adj_norm = normalize_sym(adjacency)
    enc = laplacian_eigs(adj_norm, s, solver=solver) if structural and s > 0 else None
    X_fused = fuse_features(features, enc)
    return propagate(adj_norm, X_fused, K, s=enc.s if enc is not None else 0)
