import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reid3d.errors import ShapeError
from reid3d.gradcheck import case_error, numeric_grad
from reid3d.nonlocal_block import attention_map, init_nonlocal, nonlocal_backward, nonlocal_forward
from reid3d.tensor import make_rng, matmul

from oracles import nonlocal_loop


def random_block(rng, C, dtype=np.float64, gamma=None):
    p = init_nonlocal(C, rng, dtype)
    for conv in (p.theta, p.phi, p.g, p.wz):
        conv.bias[...] = rng.standard_normal(conv.bias.shape) * 0.1
    if gamma is not None:
        p.wz_bn.gamma[...] = gamma
    else:
        p.wz_bn.gamma[...] = rng.standard_normal(C)
    p.wz_bn.beta[...] = rng.standard_normal(C) * 0.1
    return p


def test_identity_at_init_is_bit_exact():
    rng = make_rng(0)
    x = rng.standard_normal((2, 4, 2, 3, 3)).astype(np.float32)
    p = init_nonlocal(4, rng)
    z, _ = nonlocal_forward(x, p)
    assert np.array_equal(z, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([2, 4, 6]), st.booleans())
def test_identity_for_any_weights_when_gamma_zero(seed, C, training):
    rng = make_rng(seed)
    p = random_block(rng, C, np.float32, gamma=0.0)
    p.wz_bn.beta[...] = 0
    p.wz_bn.training = training
    x = (rng.standard_normal((2, C, 2, 2, 3)) * 3).astype(np.float32)
    assert np.array_equal(nonlocal_forward(x, p)[0], x)


def test_single_position_has_unit_attention():
    rng = make_rng(1)
    p = random_block(rng, 4)
    p.wz_bn.training = False
    x = rng.standard_normal((2, 4, 1, 1, 1))
    a = attention_map(x, p)
    assert a.shape == (2, 1, 1) and np.all(a == 1.0)
    z, _ = nonlocal_forward(x, p)
    ref, _ = nonlocal_loop(x, p)
    np.testing.assert_allclose(z, ref, atol=1e-12)


def test_matches_position_loop_oracle():
    rng = make_rng(2)
    p = random_block(rng, 4, np.float32)
    x = rng.standard_normal((1, 4, 2, 3, 3)).astype(np.float32)
    # B=1 would leave train-mode BN with 18 values per channel; fine for the oracle
    ref, attn = nonlocal_loop(x, p)
    z, cache = nonlocal_forward(x, p)
    np.testing.assert_allclose(z, ref, atol=1e-5, rtol=0)
    np.testing.assert_allclose(cache.attn, attn, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_oracle_equivalence_f64(seed, B, T, H, W):
    rng = make_rng(seed)
    p = random_block(rng, 4)
    if B * T * H * W < 2:
        p.wz_bn.training = False
    x = rng.standard_normal((B, 4, T, H, W))
    ref, _ = nonlocal_loop(x, p)
    np.testing.assert_allclose(nonlocal_forward(x, p)[0], ref, atol=1e-10, rtol=0)


def test_attention_rows_sum_to_one_and_uniform_when_embeddings_vanish():
    rng = make_rng(3)
    p = random_block(rng, 6, np.float32)
    x = rng.standard_normal((2, 6, 2, 2, 2)).astype(np.float32) * 5
    a = attention_map(x, p)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    for conv in (p.theta, p.phi):
        conv.weight[...] = 0
        conv.bias[...] = 0
    np.testing.assert_allclose(attention_map(x, p), 1 / 8, rtol=1e-6)


def test_attention_recomposes_pre_residual_output():
    rng = make_rng(4)
    p = random_block(rng, 4)
    x = rng.standard_normal((2, 4, 2, 2, 3))
    _, cache = nonlocal_forward(x, p)
    a = attention_map(x, p)
    g = np.einsum("oc,bcn->bno", p.g.weight[:, :, 0, 0, 0], x.reshape(2, 4, -1)) + p.g.bias
    y = matmul(a, g).transpose(0, 2, 1).reshape(cache.y.shape)
    np.testing.assert_allclose(y, cache.y, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_equivariance(seed):
    rng = make_rng(seed)
    p = random_block(rng, 4)
    x = rng.standard_normal((1, 4, 2, 2, 2))
    perm = rng.permutation(8)
    xp = x.reshape(1, 4, 8)[:, :, perm].reshape(x.shape)
    y = nonlocal_forward(x, p)[1].y.reshape(1, 2, 8)
    yp = nonlocal_forward(xp, p)[1].y.reshape(1, 2, 8)
    np.testing.assert_allclose(yp, y[:, :, perm], atol=1e-12)


def test_shape_errors():
    p = init_nonlocal(4, make_rng(5))
    with pytest.raises(ShapeError):
        nonlocal_forward(np.zeros((1, 3, 2, 2, 2), np.float32), p)
    with pytest.raises(ShapeError):
        nonlocal_forward(np.zeros((1, 6, 2, 2, 2), np.float32), p)
    with pytest.raises(ShapeError):
        init_nonlocal(5, make_rng(0))
    _, cache = nonlocal_forward(np.ones((1, 4, 2, 2, 2), np.float32), p)
    with pytest.raises(ShapeError):
        nonlocal_backward(np.zeros((1, 4, 2, 2, 1), np.float32), cache, p)


def test_backward_zero_grad_and_residual_path():
    rng = make_rng(6)
    p = random_block(rng, 4)
    x = rng.standard_normal((2, 4, 2, 2, 2))
    _, cache = nonlocal_forward(x, p)
    gx, grads = nonlocal_backward(np.zeros_like(x), cache, p)
    assert not gx.any() and not any(g.any() for g in grads.values())

    for arr in p.named().values():
        arr[...] = 0
    _, cache = nonlocal_forward(x, p)
    g = rng.standard_normal(x.shape)
    gx, _ = nonlocal_backward(g, cache, p)
    assert np.array_equal(gx, g)


@pytest.mark.parametrize("training", [True, False])
def test_backward_matches_finite_differences(training):
    rng = make_rng(7)
    p = random_block(rng, 4)
    p.wz_bn.training = training
    p.wz_bn.running_var[...] = rng.uniform(0.5, 2, 4)
    rv, rm = p.wz_bn.running_var.copy(), p.wz_bn.running_mean.copy()
    x = rng.standard_normal((2, 4, 2, 2, 2))
    g = rng.standard_normal(x.shape)

    def obj():
        p.wz_bn.running_var[...], p.wz_bn.running_mean[...] = rv, rm
        return float((nonlocal_forward(x, p)[0] * g).sum())

    _, cache = nonlocal_forward(x, p)
    gx, grads = nonlocal_backward(g, cache, p)
    pairs = [(gx, numeric_grad(obj, x))]
    named = p.named()
    assert set(grads) == set(named)
    pairs += [(grads[k], numeric_grad(obj, named[k])) for k in sorted(named)]
    assert case_error(pairs) < 1e-4
