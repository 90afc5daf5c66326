#!/usr/bin/env python3
"""Tests for the layer primitives and their backward passes."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.models.layers import (ParamLeaf, attention, attention_bwd, gelu, gelu_bwd, layernorm, layernorm_bwd,
                               linear_bwd, linear_fwd, row_product, softmax_bwd, softmax_rows,
                               xavier_uniform)
from src.utils.errors import ConfigError, InternalError
from src.utils.gradcheck import GradCheckReport, grad_check


def _numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f with respect to every entry of x."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return g


def _assert_grad(analytic, numeric, rtol=1e-6):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=1e-8)


# ==================== Linear ====================

def test_linear_identity_and_zero():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(linear_fwd(np.eye(2), W), W)
    H = np.random.default_rng(0).standard_normal((3, 2))
    assert not linear_fwd(H, np.zeros((2, 4))).any()
    np.testing.assert_array_equal(linear_fwd(H, np.zeros((2, 2)), np.array([1.0, -1.0])),
                                  np.tile([1.0, -1.0], (3, 1)))


def test_row_product_does_not_depend_on_batch_size():
    rng = np.random.default_rng(7)
    H, W = rng.standard_normal((500, 3, 64)), rng.standard_normal((64, 32))
    together = row_product(H, W)
    np.testing.assert_allclose(together, H @ W, rtol=1e-12, atol=1e-12)
    for i in (0, 137, 499):
        assert row_product(H[i:i + 1], W).tobytes() == together[i:i + 1].tobytes()


def test_linear_shape_mismatch():
    with pytest.raises(InternalError):
        linear_fwd(np.zeros((3, 4)), np.zeros((3, 2)))


def test_linear_backward():
    """Test dW = Hᵀ dOut and finite differences for every input."""
    rng = np.random.default_rng(1)
    H, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    dOut = np.ones((3, 2))
    dH, dW, db = linear_bwd(dOut, H, W, has_bias=True)
    np.testing.assert_allclose(dW, H.T @ dOut, atol=1e-14)
    f = lambda: float(linear_fwd(H, W, b).sum())
    _assert_grad(dW, _numeric_grad(f, W), rtol=1e-7)
    _assert_grad(dH, _numeric_grad(f, H), rtol=1e-7)
    _assert_grad(db, _numeric_grad(f, b), rtol=1e-7)


# ==================== Softmax ====================

def test_softmax_examples():
    np.testing.assert_array_equal(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    big = softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.isfinite(big).all()
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0, abs=1e-300)
    np.testing.assert_allclose(softmax_rows(np.array([[np.log(2.0), 0.0]])), [[2 / 3, 1 / 3]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_normalised(S):
    P = softmax_rows(S)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P > 0) and np.all(P <= 1)


def test_softmax_backward():
    rng = np.random.default_rng(2)
    S, w = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    f = lambda: float((softmax_rows(S) * w).sum())
    _assert_grad(softmax_bwd(w, softmax_rows(S)), _numeric_grad(f, S), rtol=1e-6)


# ==================== LayerNorm ====================

def test_layernorm_constant_input_maps_to_beta():
    beta = np.array([0.1, -0.2, 0.3])
    out, _ = layernorm(np.full(3, 7.0), np.ones(3), beta)
    np.testing.assert_allclose(out, beta, atol=1e-12)


def test_layernorm_closed_form():
    out, _ = layernorm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(out, np.array([1.0, -1.0]) / np.sqrt(1 + 1e-5), atol=1e-15)
    assert out[0] == pytest.approx(0.999995, abs=1e-6)


def test_layernorm_backward():
    rng = np.random.default_rng(3)
    x, g, b = rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)
    w = rng.standard_normal((2, 3, 6))
    f = lambda: float((layernorm(x, g, b)[0] * w).sum())
    _, cache = layernorm(x, g, b)
    dx, dg, db = layernorm_bwd(w, cache, g)
    _assert_grad(dx, _numeric_grad(f, x), rtol=1e-6)
    _assert_grad(dg, _numeric_grad(f, g), rtol=1e-6)
    _assert_grad(db, _numeric_grad(f, b), rtol=1e-6)


# ==================== GELU ====================

def test_gelu_values():
    assert gelu(np.array(0.0)) == 0.0
    assert abs(gelu(np.array(-10.0))) <= 1e-10
    assert gelu(np.array(30.0)) == pytest.approx(30.0)
    assert gelu(np.array(1.0)) == pytest.approx(0.8413447460685429, abs=1e-12)


def test_gelu_backward():
    x = np.linspace(-4, 4, 17)
    f = lambda: float(gelu(x).sum())
    _assert_grad(gelu_bwd(np.ones_like(x), x), _numeric_grad(f, x), rtol=1e-6)


# ==================== Attention ====================

def _attn_weights(d_m, seed):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((d_m, d_m)) * 0.5 for _ in range(4)]


def test_attention_single_token():
    """Test t=1 gives weight 1 and output H Wv Wo whatever Wq, Wk are."""
    Wq, Wk, Wv, Wo = _attn_weights(4, 0)
    H = np.random.default_rng(1).standard_normal((1, 4))
    out, cache = attention(H, Wq, Wk, Wv, Wo, heads=2)
    np.testing.assert_allclose(out, H @ Wv @ Wo, atol=1e-12)
    np.testing.assert_array_equal(cache.weights, 1.0)


def test_attention_zero_queries_are_uniform():
    _, Wk, Wv, Wo = _attn_weights(4, 2)
    H = np.random.default_rng(3).standard_normal((5, 4))
    out, cache = attention(H, np.zeros((4, 4)), Wk, Wv, Wo, heads=1)
    np.testing.assert_allclose(cache.weights, 0.2, atol=1e-15)
    np.testing.assert_allclose(out, np.tile((H @ Wv).mean(axis=0) @ Wo, (5, 1)), atol=1e-12)


def test_attention_indivisible_heads():
    Wq, Wk, Wv, Wo = _attn_weights(6, 0)
    with pytest.raises(ConfigError):
        attention(np.zeros((2, 6)), Wq, Wk, Wv, Wo, heads=4)


def test_attention_permutation_equivariance():
    Wq, Wk, Wv, Wo = _attn_weights(8, 4)
    H = np.random.default_rng(5).standard_normal((5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    out, _ = attention(H, Wq, Wk, Wv, Wo, heads=2)
    out_p, _ = attention(H[perm], Wq, Wk, Wv, Wo, heads=2)
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_attention_sequences_do_not_mix():
    """Test each batch row attends only within its own sequence."""
    Wq, Wk, Wv, Wo = _attn_weights(8, 6)
    H = np.random.default_rng(7).standard_normal((3, 4, 8))
    batched, _ = attention(H, Wq, Wk, Wv, Wo, heads=2)
    for b in range(3):
        alone, _ = attention(H[b], Wq, Wk, Wv, Wo, heads=2)
        np.testing.assert_allclose(batched[b], alone, atol=1e-13)


def test_attention_backward():
    """Test all gradients at t=5, d_m=8, heads=2."""
    Wq, Wk, Wv, Wo = _attn_weights(8, 8)
    H = np.random.default_rng(9).standard_normal((5, 8))
    w = np.random.default_rng(10).standard_normal((5, 8))
    f = lambda: float((attention(H, Wq, Wk, Wv, Wo, 2)[0] * w).sum())
    _, cache = attention(H, Wq, Wk, Wv, Wo, 2)
    grads = attention_bwd(w, cache, Wq, Wk, Wv, Wo)
    for analytic, x in zip(grads, (H, Wq, Wk, Wv, Wo)):
        _assert_grad(analytic, _numeric_grad(f, x), rtol=1e-6)


def test_forward_is_pure():
    Wq, Wk, Wv, Wo = _attn_weights(8, 11)
    H = np.random.default_rng(12).standard_normal((2, 5, 8))
    a, _ = attention(H, Wq, Wk, Wv, Wo, 4)
    b, _ = attention(H, Wq, Wk, Wv, Wo, 4)
    assert a.tobytes() == b.tobytes()


# ==================== Init and gradcheck harness ====================

def test_xavier_is_seeded_per_leaf():
    a = xavier_uniform((4, 6), 0, 'x.W')
    assert np.array_equal(a, xavier_uniform((4, 6), 0, 'x.W'))
    assert not np.array_equal(a, xavier_uniform((4, 6), 0, 'y.W'))
    assert np.abs(a).max() <= np.sqrt(6 / 10)


def test_grad_check_quadratic():
    """Test ‖W‖²/2 has gradient W."""
    leaf = ParamLeaf('W', np.random.default_rng(0).standard_normal((3, 4)))

    def closure(backward):
        if backward:
            leaf.grad[...] = leaf.value
        return 0.5 * float((leaf.value ** 2).sum())

    report = grad_check(closure, [leaf], tolerance=1e-6)
    assert report.passed
    assert report.leaves[0].checked == 12
    assert report.worst.rel_error <= 1e-6


def test_grad_check_names_corrupted_leaf():
    """Test a sign-flipped gradient is reported with its leaf name."""
    good = ParamLeaf('good', np.array([1.0, 2.0]))
    bad = ParamLeaf('bad', np.array([[0.5, -1.5]]))

    def closure(backward):
        if backward:
            good.grad[...] = good.value
            bad.grad[...] = -bad.value
        return 0.5 * float((good.value ** 2).sum() + (bad.value ** 2).sum())

    report = grad_check(closure, [good, bad], tolerance=1e-6)
    assert not report.passed
    assert [r.name for r in report.failures()] == ['bad']
    assert report.lines()[1].startswith('FAIL leaf=bad')


def test_grad_check_subsamples_large_leaves():
    leaf = ParamLeaf('big', 0.1 * np.random.default_rng(0).standard_normal((30, 30)))

    def closure(backward):
        if backward:
            leaf.grad[...] = 2 * leaf.value
        return float((leaf.value ** 2).sum())

    report = grad_check(closure, [leaf], tolerance=1e-4, sample=50)
    assert isinstance(report, GradCheckReport)
    assert report.leaves[0].checked == 50 and report.passed
