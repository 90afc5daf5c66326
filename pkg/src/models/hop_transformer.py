"""Hop-token transformer for node classification.

Forward path for a batch of B node sequences (B, K+1, d'):

    Z0 = X E                                  token embedding
    Z' = MSA(LN(Z)) + Z ; Z = FFN(LN(Z')) + Z'   x L pre-LN blocks
    Z  = LN(Z)                                final norm
    Z_out = readout(Z)                        attention / sum / single
    logits = head(Z_out)

Attention never crosses node boundaries, so any node's output is independent
of which batch it is processed in.
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.models.layers import (AttentionCache, LayerNormCache, ParamLeaf, attention,
                               attention_bwd, gelu, gelu_bwd, layernorm, layernorm_bwd,
                               linear_bwd, linear_fwd, softmax_bwd, softmax_rows,
                               xavier_uniform)
from src.utils.errors import CompatibilityError, ConfigError, InternalError

logger = logging.getLogger(__name__)

FFN_MULT = 4


class Readout(str, Enum):
    ATTENTION = 'attention'
    SUM = 'sum'
    SINGLE = 'single'

    @property
    def code(self) -> int:
        return list(Readout).index(self)

    @classmethod
    def from_code(cls, code: int) -> 'Readout':
        return list(Readout)[code]


@dataclass(frozen=True)
class ModelConfig:
    K: int
    d_prime: int
    d_m: int
    L: int
    heads: int
    c: int
    readout: Readout = Readout.ATTENTION
    use_structural: bool = True
    head_hidden: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, 'readout', Readout(self.readout))
        except ValueError:
            raise ConfigError(f"unknown readout '{self.readout}' (attention, sum, single)")
        self.validate()

    def validate(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.heads < 1 or self.d_m % self.heads:
            raise ConfigError(f"hidden dim {self.d_m} is not divisible by {self.heads} heads")
        if self.d_prime < 1 or self.c < 1:
            raise ConfigError(f"d_prime and c must be positive (d_prime={self.d_prime}, c={self.c})")

    def to_dict(self) -> Dict:
        out = asdict(self)
        out['readout'] = self.readout.value
        return out

    def check_tokens(self, tokens):
        """Raise CompatibilityError unless the token tensor fits this model."""
        if tokens.K != self.K or tokens.d_prime != self.d_prime:
            raise CompatibilityError(
                f"token cache has K={tokens.K}, d'={tokens.d_prime} but model expects "
                f"K={self.K}, d'={self.d_prime}")


# ==================== Parameters ====================

class ModelParams:
    """Ordered registry of ParamLeaf objects keyed by stable names."""

    def __init__(self, leaves: Optional[List[ParamLeaf]] = None):
        self._leaves: Dict[str, ParamLeaf] = OrderedDict()
        for leaf in leaves or []:
            self.add(leaf)

    def add(self, leaf: ParamLeaf):
        if leaf.name in self._leaves:
            raise InternalError(f"duplicate parameter name {leaf.name}")
        self._leaves[leaf.name] = leaf

    def __getitem__(self, name: str) -> ParamLeaf:
        return self._leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self._leaves

    def __iter__(self) -> Iterator[ParamLeaf]:
        return iter(self._leaves.values())

    def __len__(self) -> int:
        return len(self._leaves)

    def names(self) -> List[str]:
        return list(self._leaves)

    def v(self, name: str) -> np.ndarray:
        return self._leaves[name].value

    def zero_grad(self):
        for leaf in self:
            leaf.zero_grad()

    def accumulate(self, name: str, grad: np.ndarray):
        self._leaves[name].grad += grad.reshape(self._leaves[name].shape)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {leaf.name: leaf.value.copy() for leaf in self}

    def restore(self, values: Dict[str, np.ndarray]):
        for leaf in self:
            leaf.value[...] = values[leaf.name]

    def copy(self) -> 'ModelParams':
        return ModelParams([ParamLeaf(leaf.name, leaf.value.copy(), decay=leaf.decay) for leaf in self])

    def num_scalars(self) -> int:
        return sum(leaf.size for leaf in self)


def leaf_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, init) for every leaf, in registration order.

    init is ``xavier``, ``zeros`` or ``ones``; zeros/ones leaves are excluded
    from weight decay.
    """
    d_m, c = config.d_m, config.c
    inner = FFN_MULT * d_m
    shapes = [('embed.E', (config.d_prime, d_m), 'xavier')]
    for i in range(config.L):
        p = f"layers.{i}"
        shapes += [
            (f"{p}.ln1.gamma", (d_m,), 'ones'),
            (f"{p}.ln1.beta", (d_m,), 'zeros'),
            (f"{p}.attn.Wq", (d_m, d_m), 'xavier'),
            (f"{p}.attn.Wk", (d_m, d_m), 'xavier'),
            (f"{p}.attn.Wv", (d_m, d_m), 'xavier'),
            (f"{p}.attn.Wo", (d_m, d_m), 'xavier'),
            (f"{p}.ln2.gamma", (d_m,), 'ones'),
            (f"{p}.ln2.beta", (d_m,), 'zeros'),
            (f"{p}.ffn.W1", (d_m, inner), 'xavier'),
            (f"{p}.ffn.b1", (inner,), 'zeros'),
            (f"{p}.ffn.W2", (inner, d_m), 'xavier'),
            (f"{p}.ffn.b2", (d_m,), 'zeros'),
        ]
    shapes += [
        ('final_ln.gamma', (d_m,), 'ones'),
        ('final_ln.beta', (d_m,), 'zeros'),
        ('readout.W_a', (1, 2 * d_m), 'xavier'),
    ]
    if config.head_hidden:
        shapes += [
            ('head.W_hidden', (d_m, d_m), 'xavier'),
            ('head.b_hidden', (d_m,), 'zeros'),
        ]
    shapes += [
        ('head.W', (d_m, c), 'xavier'),
        ('head.b', (c,), 'zeros'),
    ]
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Xavier-uniform projections, zero biases and betas, unit gammas."""
    params = ModelParams()
    for name, shape, init in leaf_shapes(config):
        if init == 'xavier':
            value = xavier_uniform(shape, seed, name)
        elif init == 'ones':
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params.add(ParamLeaf(name, value, decay=init == 'xavier'))
    logger.debug(f"Initialised {len(params)} leaves ({params.num_scalars()} scalars), seed={seed}")
    return params


# ==================== Embedding ====================

def embed(batch: np.ndarray, E: np.ndarray) -> np.ndarray:
    """(B, K+1, d') -> (B, K+1, d_m); no positional term."""
    return linear_fwd(batch, E)


# ==================== Encoder ====================

@dataclass
class BlockCache:
    ln1: LayerNormCache
    attn: AttentionCache
    ln2: LayerNormCache
    ffn_in: np.ndarray
    ffn_pre: np.ndarray
    ffn_act: np.ndarray


@dataclass
class EncoderCache:
    blocks: List[BlockCache] = field(default_factory=list)
    final_ln: Optional[LayerNormCache] = None


def encoder_block(Z: np.ndarray, params: ModelParams, i: int, heads: int) -> Tuple[np.ndarray, BlockCache]:
    p = f"layers.{i}"
    v = params.v
    a, ln1 = layernorm(Z, v(f"{p}.ln1.gamma"), v(f"{p}.ln1.beta"))
    m, attn_cache = attention(a, v(f"{p}.attn.Wq"), v(f"{p}.attn.Wk"), v(f"{p}.attn.Wv"),
                              v(f"{p}.attn.Wo"), heads)
    Z_mid = Z + m
    b, ln2 = layernorm(Z_mid, v(f"{p}.ln2.gamma"), v(f"{p}.ln2.beta"))
    pre = linear_fwd(b, v(f"{p}.ffn.W1"), v(f"{p}.ffn.b1"))
    act = gelu(pre)
    f = linear_fwd(act, v(f"{p}.ffn.W2"), v(f"{p}.ffn.b2"))
    return Z_mid + f, BlockCache(ln1=ln1, attn=attn_cache, ln2=ln2, ffn_in=b, ffn_pre=pre, ffn_act=act)


def encoder_block_bwd(dZ: np.ndarray, cache: BlockCache, params: ModelParams, i: int) -> np.ndarray:
    p = f"layers.{i}"
    v = params.v
    # Z = Z_mid + FFN(LN2(Z_mid))
    d_act, dW2, db2 = linear_bwd(dZ, cache.ffn_act, v(f"{p}.ffn.W2"), has_bias=True)
    d_pre = gelu_bwd(d_act, cache.ffn_pre)
    d_b, dW1, db1 = linear_bwd(d_pre, cache.ffn_in, v(f"{p}.ffn.W1"), has_bias=True)
    d_mid_ln, dg2, dbeta2 = layernorm_bwd(d_b, cache.ln2, v(f"{p}.ln2.gamma"))
    dZ_mid = dZ + d_mid_ln
    # Z_mid = Z + MSA(LN1(Z))
    d_a, dWq, dWk, dWv, dWo = attention_bwd(dZ_mid, cache.attn, v(f"{p}.attn.Wq"), v(f"{p}.attn.Wk"),
                                            v(f"{p}.attn.Wv"), v(f"{p}.attn.Wo"))
    d_in_ln, dg1, dbeta1 = layernorm_bwd(d_a, cache.ln1, v(f"{p}.ln1.gamma"))
    for name, g in ((f"{p}.ffn.W2", dW2), (f"{p}.ffn.b2", db2), (f"{p}.ffn.W1", dW1),
                    (f"{p}.ffn.b1", db1), (f"{p}.ln2.gamma", dg2), (f"{p}.ln2.beta", dbeta2),
                    (f"{p}.attn.Wq", dWq), (f"{p}.attn.Wk", dWk), (f"{p}.attn.Wv", dWv),
                    (f"{p}.attn.Wo", dWo), (f"{p}.ln1.gamma", dg1), (f"{p}.ln1.beta", dbeta1)):
        params.accumulate(name, g)
    return dZ_mid + d_in_ln


def encode(Z0: np.ndarray, params: ModelParams, config: ModelConfig) -> Tuple[np.ndarray, EncoderCache]:
    """L pre-LN blocks followed by a final LayerNorm."""
    cache = EncoderCache()
    Z = Z0
    for i in range(config.L):
        Z, block = encoder_block(Z, params, i, config.heads)
        cache.blocks.append(block)
    Z, cache.final_ln = layernorm(Z, params.v('final_ln.gamma'), params.v('final_ln.beta'))
    return Z, cache


def encode_bwd(dZ: np.ndarray, cache: EncoderCache, params: ModelParams, config: ModelConfig) -> np.ndarray:
    dZ, dg, db = layernorm_bwd(dZ, cache.final_ln, params.v('final_ln.gamma'))
    params.accumulate('final_ln.gamma', dg)
    params.accumulate('final_ln.beta', db)
    for i in reversed(range(config.L)):
        dZ = encoder_block_bwd(dZ, cache.blocks[i], params, i)
    return dZ


# ==================== Readout ====================

@dataclass
class ReadoutCache:
    Z: np.ndarray
    alpha: Optional[np.ndarray] = None


def hop_logits(Z: np.ndarray, W_a: np.ndarray) -> np.ndarray:
    """(Z_0 ‖ Z_k) · W_a for k = 1..K, shape (B, K)."""
    d_m = Z.shape[-1]
    w_node, w_hop = W_a[0, :d_m], W_a[0, d_m:]
    node = np.einsum('bd,d->b', Z[:, 0, :], w_node, optimize=False)
    hops = np.einsum('bkd,d->bk', Z[:, 1:, :], w_hop, optimize=False)
    return node[:, None] + hops


def readout(Z: np.ndarray, W_a: np.ndarray, variant: Readout) -> Tuple[np.ndarray, ReadoutCache]:
    """(B, K+1, d_m) -> (B, d_m)."""
    variant = Readout(variant)
    if variant is Readout.SINGLE:
        return Z[:, 0, :].copy(), ReadoutCache(Z=Z)
    if variant is Readout.SUM:
        return Z.sum(axis=1), ReadoutCache(Z=Z)
    alpha = softmax_rows(hop_logits(Z, W_a))
    out = Z[:, 0, :] + (alpha[:, :, None] * Z[:, 1:, :]).sum(axis=1)
    return out, ReadoutCache(Z=Z, alpha=alpha)


def readout_bwd(dOut: np.ndarray, cache: ReadoutCache, W_a: np.ndarray,
                variant: Readout) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Returns (dZ, dW_a); dW_a is None for the parameter-free variants."""
    Z = cache.Z
    dZ = np.zeros_like(Z)
    variant = Readout(variant)
    if variant is Readout.SINGLE:
        dZ[:, 0, :] = dOut
        return dZ, None
    if variant is Readout.SUM:
        dZ[...] = dOut[:, None, :]
        return dZ, None

    d_m = Z.shape[-1]
    alpha = cache.alpha
    hops = Z[:, 1:, :]
    d_alpha = (hops * dOut[:, None, :]).sum(axis=-1)
    d_logit = softmax_bwd(d_alpha, alpha)
    w_node, w_hop = W_a[0, :d_m], W_a[0, d_m:]
    dZ[:, 0, :] = dOut + d_logit.sum(axis=1)[:, None] * w_node
    dZ[:, 1:, :] = alpha[:, :, None] * dOut[:, None, :] + d_logit[:, :, None] * w_hop
    dW_a = np.concatenate([
        (d_logit.sum(axis=1)[:, None] * Z[:, 0, :]).sum(axis=0),
        (d_logit[:, :, None] * hops).sum(axis=(0, 1)),
    ])[None, :]
    return dZ, dW_a


# ==================== Head and loss ====================

@dataclass
class HeadCache:
    Z_out: np.ndarray
    hidden_pre: Optional[np.ndarray] = None
    hidden_act: Optional[np.ndarray] = None


def classify(Z_out: np.ndarray, params: ModelParams, config: ModelConfig) -> Tuple[np.ndarray, HeadCache]:
    """Linear head, or d_m -> d_m GELU -> c when head_hidden is set."""
    cache = HeadCache(Z_out=Z_out)
    x = Z_out
    if config.head_hidden:
        cache.hidden_pre = linear_fwd(x, params.v('head.W_hidden'), params.v('head.b_hidden'))
        cache.hidden_act = x = gelu(cache.hidden_pre)
    return linear_fwd(x, params.v('head.W'), params.v('head.b')), cache


def classify_bwd(dlogits: np.ndarray, cache: HeadCache, params: ModelParams, config: ModelConfig) -> np.ndarray:
    x = cache.hidden_act if config.head_hidden else cache.Z_out
    dx, dW, db = linear_bwd(dlogits, x, params.v('head.W'), has_bias=True)
    params.accumulate('head.W', dW)
    params.accumulate('head.b', db)
    if config.head_hidden:
        d_pre = gelu_bwd(dx, cache.hidden_pre)
        dx, dWh, dbh = linear_bwd(d_pre, cache.Z_out, params.v('head.W_hidden'), has_bias=True)
        params.accumulate('head.W_hidden', dWh)
        params.accumulate('head.b_hidden', dbh)
    return dx


def ce_loss(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    targets = np.asarray(targets, dtype=np.int64)
    B, c = logits.shape
    if len(targets) != B:
        raise InternalError(f"{len(targets)} targets for {B} logit rows")
    if B and (targets.min() < 0 or targets.max() >= c):
        raise InternalError("target class id outside [0, c)")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    rows = np.arange(B)
    loss = float(-log_p[rows, targets].mean())
    dlogits = np.exp(log_p)
    dlogits[rows, targets] -= 1.0
    return loss, dlogits / B


# ==================== Full model ====================

@dataclass
class ForwardCache:
    batch: np.ndarray
    encoder: EncoderCache
    readout: ReadoutCache
    head: HeadCache


def forward(params: ModelParams, config: ModelConfig, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Logits (B, c) for a token batch (B, K+1, d')."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1:] != (config.K + 1, config.d_prime):
        raise InternalError(f"batch shape {batch.shape} does not match (B, {config.K + 1}, {config.d_prime})")
    Z0 = embed(batch, params.v('embed.E'))
    Z, enc_cache = encode(Z0, params, config)
    Z_out, ro_cache = readout(Z, params.v('readout.W_a'), config.readout)
    logits, head_cache = classify(Z_out, params, config)
    return logits, ForwardCache(batch=batch, encoder=enc_cache, readout=ro_cache, head=head_cache)


def backward(dlogits: np.ndarray, cache: ForwardCache, params: ModelParams, config: ModelConfig):
    """Accumulate gradients of every leaf into ``params``."""
    dZ_out = classify_bwd(dlogits, cache.head, params, config)
    dZ, dW_a = readout_bwd(dZ_out, cache.readout, params.v('readout.W_a'), config.readout)
    if dW_a is not None:
        params.accumulate('readout.W_a', dW_a)
    dZ0 = encode_bwd(dZ, cache.encoder, params, config)
    _, dE, _ = linear_bwd(dZ0, cache.batch, params.v('embed.E'))
    params.accumulate('embed.E', dE)


def loss_and_grad(params: ModelParams, config: ModelConfig, batch: np.ndarray, targets: np.ndarray) -> float:
    """Zero grads, run forward and backward, return the mean loss."""
    params.zero_grad()
    logits, cache = forward(params, config, batch)
    loss, dlogits = ce_loss(logits, targets)
    backward(dlogits, cache, params, config)
    return loss


def predict(params: ModelParams, config: ModelConfig, batch: np.ndarray) -> np.ndarray:
    """Arg-max class per node; ties go to the lowest class id."""
    logits, _ = forward(params, config, batch)
    return np.argmax(logits, axis=1)


def hop_attention(params: ModelParams, config: ModelConfig, batch: np.ndarray) -> np.ndarray:
    """Readout coefficients α (B, K) for an attention-readout model."""
    if config.readout is not Readout.ATTENTION:
        raise ConfigError(f"hop weights need the attention readout, model uses '{config.readout.value}'")
    _, cache = forward(params, config, batch)
    return cache.readout.alpha
