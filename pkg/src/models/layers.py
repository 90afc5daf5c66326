"""Dense fp64 layer primitives with hand-written backward passes.

Every forward function is pure and returns what its backward needs; arrays may
carry any number of leading batch dimensions, the layer acts on the last one
(or the last two for attention).
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import ndtr

from src.utils.errors import ConfigError, InternalError
from src.utils.rng import named_rng

# Tensor2: a (rows, cols) fp64 array; leading batch axes are allowed everywhere below.
Tensor2 = np.ndarray

LAYERNORM_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class ParamLeaf:
    """A learnable array with its gradient accumulator."""
    name: str
    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise InternalError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)


def xavier_uniform(shape: Tuple[int, int], seed: int, name: str) -> np.ndarray:
    """Glorot-uniform init drawn from the ``init/<name>`` stream."""
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return named_rng(seed, f"init/{name}").uniform(-limit, limit, size=shape)


def _check_inner(a: np.ndarray, w: np.ndarray, what: str):
    if a.shape[-1] != w.shape[0]:
        raise InternalError(f"{what}: input width {a.shape[-1]} does not match weight rows {w.shape[0]}")


# ==================== Linear ====================

def row_product(H: np.ndarray, W: np.ndarray) -> np.ndarray:
    """H · W over the last axis of H.

    Each output entry is summed in an order that does not depend on how many
    rows H has, so a row gives the same bits alone or inside a batch.
    """
    return np.einsum('...d,de->...e', H, W, optimize=False)


def linear_fwd(H: np.ndarray, W: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    _check_inner(H, W, 'linear')
    out = row_product(H, W)
    if bias is not None:
        out = out + bias
    return out


def linear_bwd(dOut: np.ndarray, H: np.ndarray, W: np.ndarray, has_bias: bool = False):
    """Returns (dH, dW, dBias); dBias is None without a bias."""
    a, b = W.shape
    dH = dOut @ W.T
    dW = H.reshape(-1, a).T @ dOut.reshape(-1, b)
    dBias = dOut.reshape(-1, b).sum(axis=0) if has_bias else None
    return dH, dW, dBias


# ==================== Softmax ====================

def softmax_rows(S: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    shifted = S - S.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(dP: np.ndarray, P: np.ndarray) -> np.ndarray:
    return P * (dP - (dP * P).sum(axis=-1, keepdims=True))


# ==================== LayerNorm ====================

@dataclass
class LayerNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              eps: float = LAYERNORM_EPS) -> Tuple[np.ndarray, LayerNormCache]:
    """(x - mean) / sqrt(var + eps) * gamma + beta with population variance."""
    if x.shape[-1] < 1:
        raise InternalError("layernorm needs at least one feature")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gamma + beta, LayerNormCache(x_hat=x_hat, inv_std=inv_std)


def layernorm_bwd(dOut: np.ndarray, cache: LayerNormCache, gamma: np.ndarray):
    """Returns (dx, dgamma, dbeta)."""
    d = dOut.shape[-1]
    x_hat = cache.x_hat
    dx_hat = dOut * gamma
    dx = cache.inv_std * (dx_hat
                          - dx_hat.mean(axis=-1, keepdims=True)
                          - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True))
    dgamma = (dOut * x_hat).reshape(-1, d).sum(axis=0)
    dbeta = dOut.reshape(-1, d).sum(axis=0)
    return dx, dgamma, dbeta


# ==================== GELU ====================

def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    return x * ndtr(x)


def gelu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


# ==================== Multi-head attention ====================

@dataclass
class AttentionCache:
    H: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    weights: np.ndarray     # (B, heads, t, t), kept for inspection
    O: np.ndarray           # concatenated head outputs before Wo
    heads: int
    squeeze: bool


def _split_heads(X: np.ndarray, heads: int) -> np.ndarray:
    B, t, d = X.shape
    return X.reshape(B, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(X: np.ndarray) -> np.ndarray:
    B, h, t, dk = X.shape
    return X.transpose(0, 2, 1, 3).reshape(B, t, h * dk)


def attention(H: np.ndarray, Wq: np.ndarray, Wk: np.ndarray, Wv: np.ndarray, Wo: np.ndarray,
              heads: int) -> Tuple[np.ndarray, AttentionCache]:
    """Multi-head scaled dot-product self-attention over the token axis.

    ``H`` is (t, d_m) or (B, t, d_m); each of the B sequences attends only to
    its own tokens.
    """
    squeeze = H.ndim == 2
    if squeeze:
        H = H[None]
    d_m = H.shape[-1]
    if heads < 1 or d_m % heads:
        raise ConfigError(f"hidden dim {d_m} is not divisible by {heads} heads")
    for W in (Wq, Wk, Wv, Wo):
        _check_inner(H, W, 'attention')

    d_k = d_m // heads
    Q, K, V = row_product(H, Wq), row_product(H, Wk), row_product(H, Wv)
    Qh, Kh, Vh = _split_heads(Q, heads), _split_heads(K, heads), _split_heads(V, heads)
    scores = np.einsum('bhtd,bhsd->bhts', Qh, Kh, optimize=False) / math.sqrt(d_k)
    P = softmax_rows(scores)
    O = _merge_heads(np.einsum('bhts,bhsd->bhtd', P, Vh, optimize=False))
    out = row_product(O, Wo)
    cache = AttentionCache(H=H, Q=Q, K=K, V=V, weights=P, O=O, heads=heads, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def attention_bwd(dOut: np.ndarray, cache: AttentionCache, Wq: np.ndarray, Wk: np.ndarray,
                  Wv: np.ndarray, Wo: np.ndarray):
    """Returns (dH, dWq, dWk, dWv, dWo)."""
    if cache.squeeze:
        dOut = dOut[None]
    heads = cache.heads
    d_m = cache.H.shape[-1]
    d_k = d_m // heads
    scale = 1.0 / math.sqrt(d_k)

    dO, dWo, _ = linear_bwd(dOut, cache.O, Wo)
    dOh = _split_heads(dO, heads)
    Qh, Kh, Vh = (_split_heads(x, heads) for x in (cache.Q, cache.K, cache.V))
    P = cache.weights

    dP = dOh @ Vh.transpose(0, 1, 3, 2)
    dVh = P.transpose(0, 1, 3, 2) @ dOh
    dS = softmax_bwd(dP, P) * scale
    dQh = dS @ Kh
    dKh = dS.transpose(0, 1, 3, 2) @ Qh

    dQ, dK, dV = _merge_heads(dQh), _merge_heads(dKh), _merge_heads(dVh)
    H = cache.H
    dH_q, dWq, _ = linear_bwd(dQ, H, Wq)
    dH_k, dWk, _ = linear_bwd(dK, H, Wk)
    dH_v, dWv, _ = linear_bwd(dV, H, Wv)
    dH = dH_q + dH_k + dH_v
    if cache.squeeze:
        dH = dH[0]
    return dH, dWq, dWk, dWv, dWo
