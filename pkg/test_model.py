#!/usr/bin/env python3
"""Tests for the hop-token transformer, its gradients and the model file."""
import struct

import numpy as np
import pytest

from src.models.hop_transformer import (ModelConfig, ModelParams, Readout, ce_loss, classify, embed, encode,
                                        forward, hop_attention, hop_logits, init_params, leaf_shapes,
                                        predict, readout)
from src.models.layers import attention, gelu, layernorm, linear_fwd
from src.models.tokens import TokenMeta, TokenTensor
from src.services.gradcheck_service import check_model_gradients, make_problem
from src.services.model_store import MODEL_MAGIC, load_model, model_store, save_model
from src.utils.errors import (CompatibilityError, ConfigError, InternalError, ManifestMismatch, ModelNotFound,
                              ModelVersionError, NotAModelFile, TruncatedModelFile)


def _config(**overrides):
    base = dict(K=3, d_prime=5, d_m=8, L=2, heads=2, c=3)
    base.update(overrides)
    return ModelConfig(**base)


def _batch(config, B=4, seed=0):
    return np.random.default_rng(seed).standard_normal((B, config.K + 1, config.d_prime))


# ==================== Config and parameters ====================

def test_config_validation():
    with pytest.raises(ConfigError):
        _config(d_m=10, heads=3)
    with pytest.raises(ConfigError):
        _config(K=0)
    with pytest.raises(ConfigError, match="unknown readout"):
        _config(readout='max')
    assert _config(readout='sum').readout is Readout.SUM


def test_leaf_names_and_decay_flags():
    config = _config(L=1, head_hidden=True)
    params = init_params(config, 0)
    assert params.names() == [name for name, _, _ in leaf_shapes(config)]
    assert 'head.W_hidden' in params
    assert params['layers.0.attn.Wq'].shape == (8, 8)
    assert params['layers.0.ffn.W1'].shape == (8, 32)
    assert params['readout.W_a'].shape == (1, 16)
    assert np.array_equal(params.v('layers.0.ln1.gamma'), np.ones(8))
    assert not params.v('head.b').any()
    assert params['embed.E'].decay and not params['final_ln.gamma'].decay and not params['head.b'].decay


def test_init_is_seeded():
    a, b, c = init_params(_config(), 1), init_params(_config(), 1), init_params(_config(), 2)
    assert all(np.array_equal(a.v(n), b.v(n)) for n in a.names())
    assert not np.array_equal(a.v('embed.E'), c.v('embed.E'))


def test_snapshot_restore():
    params = init_params(_config(), 0)
    snap = params.snapshot()
    params['embed.E'].value += 1.0
    params.restore(snap)
    assert np.array_equal(params.v('embed.E'), snap['embed.E'])


# ==================== Embedding and encoder ====================

def test_embed_identity_zero_and_oracle():
    X = _batch(_config(d_prime=4, d_m=4))
    assert np.array_equal(embed(X, np.eye(4)), X)
    assert not embed(X, np.zeros((4, 4))).any()
    rng = np.random.default_rng(3)
    X, E = rng.standard_normal((2, 3, 3)), rng.standard_normal((3, 4))
    oracle = np.array([[X[b, k] @ E for k in range(3)] for b in range(2)])
    np.testing.assert_allclose(embed(X, E), oracle, atol=1e-12)


def test_encode_zero_weights_is_residual_identity():
    """Test blocks pass the input through so only the final norm acts."""
    config = _config()
    params = init_params(config, 0)
    for leaf in params:
        if leaf.decay or leaf.name.endswith(('.b1', '.b2')):
            leaf.value[...] = 0.0
    Z0 = np.random.default_rng(1).standard_normal((3, 4, 8))
    Z, _ = encode(Z0, params, config)
    expected, _ = layernorm(Z0, np.ones(8), np.zeros(8))
    assert Z.tobytes() == expected.tobytes()


def test_encode_single_layer_matches_manual_composition():
    config = _config(L=1)
    params = init_params(config, 5)
    v = params.v
    Z0 = np.random.default_rng(2).standard_normal((2, 4, 8))
    a, _ = layernorm(Z0, v('layers.0.ln1.gamma'), v('layers.0.ln1.beta'))
    m, _ = attention(a, v('layers.0.attn.Wq'), v('layers.0.attn.Wk'), v('layers.0.attn.Wv'),
                     v('layers.0.attn.Wo'), config.heads)
    Z_mid = Z0 + m
    b, _ = layernorm(Z_mid, v('layers.0.ln2.gamma'), v('layers.0.ln2.beta'))
    f = linear_fwd(gelu(linear_fwd(b, v('layers.0.ffn.W1'), v('layers.0.ffn.b1'))),
                   v('layers.0.ffn.W2'), v('layers.0.ffn.b2'))
    manual, _ = layernorm(Z_mid + f, v('final_ln.gamma'), v('final_ln.beta'))
    Z, _ = encode(Z0, params, config)
    assert Z.tobytes() == manual.tobytes()


# ==================== Readout ====================

def test_attention_readout_single_hop_collapses():
    Z = np.random.default_rng(0).standard_normal((5, 2, 4))
    out, cache = readout(Z, np.random.default_rng(1).standard_normal((1, 8)), Readout.ATTENTION)
    assert np.array_equal(cache.alpha, np.ones((5, 1)))
    assert np.array_equal(out, Z[:, 0] + Z[:, 1])


def test_attention_readout_zero_weights_is_uniform():
    Z = np.random.default_rng(0).standard_normal((3, 5, 4))
    out, cache = readout(Z, np.zeros((1, 8)), Readout.ATTENTION)
    np.testing.assert_allclose(cache.alpha, 0.25, atol=1e-15)
    np.testing.assert_allclose(out, Z[:, 0] + Z[:, 1:].mean(axis=1), atol=1e-12)


def test_sum_and_single_readouts():
    Z = np.eye(3)[None]
    out, _ = readout(Z, np.zeros((1, 6)), Readout.SUM)
    assert out.tolist() == [[1.0, 1.0, 1.0]]
    Z = np.random.default_rng(4).standard_normal((2, 3, 3))
    out, _ = readout(Z, np.zeros((1, 6)), Readout.SINGLE)
    assert np.array_equal(out, Z[:, 0])


def test_attention_coefficients_normalised_over_many_nodes():
    rng = np.random.default_rng(7)
    Z, W_a = rng.standard_normal((1000, 7, 8)), rng.standard_normal((1, 16))
    _, cache = readout(Z, W_a, Readout.ATTENTION)
    np.testing.assert_allclose(cache.alpha.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(cache.alpha > 0) and np.all(cache.alpha <= 1)


def test_attention_coefficients_shift_invariant():
    """Test a change of the node half of W_a shifts every hop logit equally."""
    rng = np.random.default_rng(8)
    Z, W_a = rng.standard_normal((1000, 5, 8)), rng.standard_normal((1, 16))
    shifted = W_a.copy()
    shifted[0, :8] += rng.standard_normal(8)
    logits, logits_shifted = hop_logits(Z, W_a), hop_logits(Z, shifted)
    spread = (logits_shifted - logits) - (logits_shifted - logits)[:, :1]
    assert np.abs(spread).max() <= 1e-12
    _, a = readout(Z, W_a, Readout.ATTENTION)
    _, b = readout(Z, shifted, Readout.ATTENTION)
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)


# ==================== Head and loss ====================

def test_classify_zero_identity_and_oracle():
    config = _config(d_m=4, heads=1, c=4)
    params = init_params(config, 0)
    Z_out = np.random.default_rng(0).standard_normal((3, 4))
    params['head.W'].value[...] = 0.0
    logits, _ = classify(Z_out, params, config)
    assert not logits.any()
    params['head.W'].value[...] = np.eye(4)
    logits, _ = classify(Z_out, params, config)
    assert np.array_equal(logits, Z_out)
    W = np.random.default_rng(1).standard_normal((4, 4))
    params['head.W'].value[...] = W
    params['head.b'].value[...] = 0.5
    logits, _ = classify(Z_out, params, config)
    np.testing.assert_allclose(logits, Z_out @ W + 0.5, atol=1e-12)


def test_ce_loss_examples():
    loss, _ = ce_loss(np.array([[0.0, 0.0]]), [0])
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)
    loss, grad = ce_loss(np.array([[100.0, -100.0]]), [0])
    assert 0.0 <= loss <= 1e-80 and np.isfinite(grad).all()
    with pytest.raises(InternalError):
        ce_loss(np.zeros((2, 3)), [0, 3])


def test_ce_loss_gradient():
    rng = np.random.default_rng(5)
    logits, targets = rng.standard_normal((8, 5)), rng.integers(0, 5, 8)
    _, grad = ce_loss(logits, targets)
    numeric = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        orig = logits[idx]
        logits[idx] = orig + 1e-5
        plus, _ = ce_loss(logits, targets)
        logits[idx] = orig - 1e-5
        minus, _ = ce_loss(logits, targets)
        logits[idx] = orig
        numeric[idx] = (plus - minus) / 2e-5
    np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-9)


# ==================== Full model ====================

def test_forward_checks_batch_shape():
    config = _config()
    params = init_params(config, 0)
    logits, _ = forward(params, config, _batch(config))
    assert logits.shape == (4, 3)
    with pytest.raises(InternalError):
        forward(params, config, np.zeros((4, 3, 5)))


@pytest.mark.parametrize('readout_kind', list(Readout))
def test_batch_independence(readout_kind):
    """Test a node's logits are bitwise the same alone, in a small batch and in a large one."""
    config = _config(d_m=16, readout=readout_kind)
    params = init_params(config, 3)
    batch = _batch(config, B=300, seed=4)
    together, _ = forward(params, config, batch)
    middle, _ = forward(params, config, batch[100:107])
    assert middle.tobytes() == together[100:107].tobytes()
    for i in range(300):
        alone, _ = forward(params, config, batch[i:i + 1])
        assert alone[0].tobytes() == together[i].tobytes()


def test_predict_ties_go_to_lowest_class():
    config = _config()
    params = init_params(config, 0)
    params['head.W'].value[...] = 0.0
    assert predict(params, config, _batch(config)).tolist() == [0, 0, 0, 0]


def test_hop_attention():
    config = _config()
    params = init_params(config, 0)
    alpha = hop_attention(params, config, _batch(config))
    assert alpha.shape == (4, 3)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ConfigError, match="attention readout"):
        hop_attention(init_params(_config(readout='sum'), 0), _config(readout='sum'), _batch(config))


# ==================== Gradient check ====================

def test_full_model_gradcheck():
    """Test every leaf at d_m=16, K=3, L=2, heads=2, c=4, B=3 with structure on."""
    report = check_model_gradients(seed=0, tolerance=1e-4)
    assert report.passed, '\n'.join(report.lines())
    problem = make_problem(0)
    assert {r.name for r in report.leaves} == set(problem.params.names())
    assert problem.config.use_structural and problem.config.d_prime == 7


@pytest.mark.parametrize('overrides', [
    dict(readout=Readout.SUM),
    dict(readout=Readout.SINGLE, L=1, heads=1),
    dict(head_hidden=True),
])
def test_gradcheck_variants(overrides):
    report = check_model_gradients(seed=1, tolerance=1e-4, **overrides)
    assert report.passed, '\n'.join(report.lines())


def test_gradcheck_is_deterministic():
    assert check_model_gradients(seed=2).lines() == check_model_gradients(seed=2).lines()


def test_gradcheck_tolerance_floor_fails():
    report = check_model_gradients(seed=0, tolerance=1e-12)
    assert not report.passed
    assert any(line.startswith('FAIL') for line in report.lines())


# ==================== Model file ====================

def test_model_round_trip(tmp_path):
    config = _config(head_hidden=True, readout='single')
    params = init_params(config, 4)
    path = str(tmp_path / 'm.nagm')
    save_model(params, config, path)
    loaded, loaded_config = load_model(path)
    assert loaded_config == config
    assert loaded.names() == params.names()
    for leaf in params:
        assert loaded.v(leaf.name).tobytes() == leaf.value.tobytes()
        assert loaded[leaf.name].decay == leaf.decay


def test_model_file_errors(tmp_path):
    config = _config()
    raw = model_store.encode(init_params(config, 0), config)
    assert raw[:4] == MODEL_MAGIC
    with pytest.raises(NotAModelFile):
        model_store.decode(b'NAGT' + raw[4:])
    with pytest.raises(ModelVersionError):
        model_store.decode(raw[:4] + struct.pack('<I', 9) + raw[8:])
    with pytest.raises(TruncatedModelFile, match="truncated model file"):
        model_store.decode(raw[:-5])
    with pytest.raises(ManifestMismatch):
        model_store.decode(raw + b'\x00')
    # d_m lives at byte 16; a different width no longer fits the stored leaves
    with pytest.raises(ManifestMismatch):
        model_store.decode(raw[:16] + struct.pack('<I', 4) + raw[20:])
    # heads lives at byte 24; zero heads is not a valid model
    with pytest.raises(ManifestMismatch, match="invalid model config"):
        model_store.decode(raw[:24] + struct.pack('<I', 0) + raw[28:])
    with pytest.raises(ModelNotFound, match="model file not found"):
        load_model(str(tmp_path / 'missing.nagm'))


def test_model_token_compatibility():
    config = _config()
    tokens = TokenTensor(data=np.zeros((2, 5, 5)), meta=TokenMeta(K=4, s=0, norm_tag=0, input_hash=bytes(32)))
    with pytest.raises(CompatibilityError, match="K=4"):
        config.check_tokens(tokens)


def test_model_params_copy_is_independent():
    params = init_params(_config(), 0)
    clone = params.copy()
    clone['embed.E'].value += 1.0
    assert isinstance(clone, ModelParams)
    assert not np.array_equal(clone.v('embed.E'), params.v('embed.E'))
