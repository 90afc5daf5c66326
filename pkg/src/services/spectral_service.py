"""Laplacian eigenvector structural encoding.

The structure matrix U holds the s eigenvectors of L = I - Â belonging to the
smallest non-trivial eigenvalues and is concatenated to the node features.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from src.config import Config
from src.models.graph import CsrMatrix
from src.utils.errors import ConfigError, InternalError
from src.utils.rng import named_rng

logger = logging.getLogger(__name__)

TRIVIAL_EIGENVALUE = 1e-8
RESIDUAL_TOLERANCE = 1e-8
# entries within this relative distance of the column maximum count as tied
SIGN_TIE_RTOL = 1e-10


@dataclass(frozen=True)
class SpectralEncoding:
    """Retained eigenpairs: ``vectors[:, k]`` belongs to ``eigenvalues[k]``."""
    eigenvalues: np.ndarray
    vectors: np.ndarray

    @property
    def s(self) -> int:
        return len(self.eigenvalues)

    def fused_dim(self, d: int) -> int:
        return d + self.s


def apply_sign_convention(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry is positive.

    Ties (within SIGN_TIE_RTOL) go to the lowest row index.
    """
    out = np.array(vectors, dtype=np.float64, copy=True)
    for k in range(out.shape[1]):
        col = out[:, k]
        mags = np.abs(col)
        peak = mags.max() if len(mags) else 0.0
        if peak == 0.0:
            continue
        idx = int(np.flatnonzero(mags >= peak * (1.0 - SIGN_TIE_RTOL))[0])
        if col[idx] < 0:
            out[:, k] = -col
    return out


def count_components(adj_norm: CsrMatrix) -> int:
    n_comp, _ = connected_components(adj_norm.to_scipy(), directed=False)
    return int(n_comp)


def _laplacian(adj_norm: CsrMatrix) -> sp.csr_matrix:
    n = adj_norm.n_rows
    return (sp.identity(n, format='csr') - adj_norm.to_scipy()).tocsr()


def _dense_eigs(adj_norm: CsrMatrix):
    lap = _laplacian(adj_norm).toarray()
    return sla.eigh(lap)


def _lanczos_eigs(adj_norm: CsrMatrix, k: int):
    """k smallest eigenpairs of L through the largest of 2I - L = I + Â.

    ARPACK's implicitly restarted Lanczos keeps the basis orthogonal; the shift
    maps the low end of L's [0, 2] spectrum to the top of the operator's.
    """
    n = adj_norm.n_rows
    shifted = (sp.identity(n, format='csr') + adj_norm.to_scipy()).tocsr()
    v0 = named_rng(0, 'lanczos/v0').standard_normal(n)
    try:
        mu, vecs = eigsh(shifted, k=k, which='LA', v0=v0, tol=0.0, maxiter=10 * n)
    except ArpackNoConvergence as e:
        raise InternalError(
            f"Lanczos did not converge within {10 * n} iterations "
            f"({len(e.eigenvalues)} of {k} eigenpairs)")
    except ArpackError as e:
        raise InternalError(f"Lanczos failed: {e}")
    lam = 2.0 - mu
    order = np.argsort(lam, kind='stable')
    return lam[order], vecs[:, order]


def laplacian_eigs(adj_norm: CsrMatrix, s: int, solver: str = 'auto',
                   dense_max_n: Optional[int] = None) -> SpectralEncoding:
    """Eigenpairs of I - Â for the s smallest eigenvalues above 1e-8.

    ``solver`` is ``'dense'``, ``'lanczos'`` or ``'auto'`` (dense up to
    ``dense_max_n`` nodes).
    """
    n = adj_norm.n_rows
    dense_max_n = Config.DENSE_EIG_MAX_N if dense_max_n is None else dense_max_n
    if s < 1:
        raise ConfigError(f"eig-s must be >= 1, got {s}")
    n_comp = count_components(adj_norm)
    # one zero eigenvalue per component that has edges; isolated nodes sit at 1
    singletons = int(np.count_nonzero(np.diff(adj_norm.row_offsets) == 0))
    n_trivial = n_comp - singletons
    available = n - n_trivial
    if s > available:
        raise ConfigError(
            f"eig-s={s} exceeds the non-trivial spectrum: {available} eigenvectors available "
            f"(n={n}, {n_comp} connected components)")
    k = s + n_trivial

    if solver not in ('auto', 'dense', 'lanczos'):
        raise ConfigError(f"unknown eigensolver '{solver}'")
    use_dense = solver == 'dense' or (solver == 'auto' and n <= dense_max_n) or k >= n - 1
    if use_dense:
        lam, vecs = _dense_eigs(adj_norm)
    else:
        lam, vecs = _lanczos_eigs(adj_norm, k)
    logger.debug(f"laplacian_eigs: solver={'dense' if use_dense else 'lanczos'} n={n} k={k}")

    keep = np.flatnonzero(lam > TRIVIAL_EIGENVALUE)[:s]
    if len(keep) < s:
        raise ConfigError(f"eig-s={s} exceeds the non-trivial spectrum: {len(keep)} eigenvectors available")
    lam = np.ascontiguousarray(lam[keep])
    vecs = apply_sign_convention(vecs[:, keep])

    lap = _laplacian(adj_norm)
    residuals = np.linalg.norm(lap @ vecs - vecs * lam, axis=0)
    worst = float(residuals.max())
    if worst > RESIDUAL_TOLERANCE:
        raise InternalError(f"eigenpair residual {worst:.3e} exceeds {RESIDUAL_TOLERANCE:.0e}")

    logger.info(f"Computed {s} Laplacian eigenpairs (lambda in [{lam[0]:.6f}, {lam[-1]:.6f}], "
                f"max residual {worst:.2e})")
    lam.setflags(write=False)
    vecs.setflags(write=False)
    return SpectralEncoding(eigenvalues=lam, vectors=vecs)


def fuse_features(X: np.ndarray, enc: Optional[SpectralEncoding]) -> np.ndarray:
    """X' = X ‖ U. With no encoding (s=0) the result equals X."""
    X = np.asarray(X, dtype=np.float64)
    if enc is None or enc.s == 0:
        return X.copy()
    if enc.vectors.shape[0] != X.shape[0]:
        raise InternalError(f"feature rows {X.shape[0]} != encoding rows {enc.vectors.shape[0]}")
    return np.concatenate([X, enc.vectors], axis=1)
