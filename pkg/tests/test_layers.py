"""Layer kernels against naive scalar-loop oracles and finite differences."""

import numpy as np
import pytest

from dicegrad import gradcheck, layers
from dicegrad.errors import SizeError, StateError
from dicegrad.tensor_core import Rng


def naive_conv3x3(x, w, b):
    """Direct 6-loop definition of same-padded 3x3 cross-correlation."""
    B, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((B, O, H, W))
    for bi in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(C):
                        for u in range(3):
                            for v in range(3):
                                acc += w[o, c, u, v] * xp[bi, c, i + u, j + v]
                    y[bi, o, i, j] = acc
    return y


def _conv_params(rng, cin, cout):
    return layers.LayerParams(weights=rng.normal((cout, cin, 3, 3)),
                              bias=rng.normal((cout,)))


def test_conv_matches_naive_oracle():
    rng = Rng(11)
    x = rng.normal((2, 3, 5, 6))
    p = _conv_params(rng.child(1), 3, 4)
    y, _ = layers.conv2d(x, p)
    assert np.allclose(y, naive_conv3x3(x, p.weights, p.bias), atol=1e-12)


def test_conv_identity_kernel():
    rng = Rng(12)
    x = rng.normal((1, 2, 6, 6))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    y, _ = layers.conv2d(x, layers.LayerParams(weights=w, bias=np.zeros(2)))
    assert np.allclose(y, x, atol=1e-14)


def test_conv_shape_checks():
    p = _conv_params(Rng(0), 3, 2)
    with pytest.raises(SizeError):
        layers.conv2d(np.zeros((2, 4, 5, 5)), p)        # channel mismatch
    with pytest.raises(SizeError):
        layers.conv2d(np.zeros((4, 5, 5)), p)           # wrong rank


def test_conv_gradients():
    res = gradcheck.check_conv()
    assert all(err < 1e-6 for err in res.values()), res


def test_batchnorm_train_normalizes():
    rng = Rng(21)
    x = rng.normal((6, 3, 7, 7), mean=3.0, std=2.0)
    p = layers.LayerParams(bn_gamma=np.ones(3), bn_beta=np.zeros(3),
                           bn_running_mean=np.zeros(3), bn_running_var=np.ones(3))
    y, _ = layers.batchnorm(x, p, "train")
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batchnorm_running_stats_update():
    rng = Rng(22)
    x = rng.normal((4, 2, 5, 5), mean=1.0)
    p = layers.LayerParams(bn_gamma=np.ones(2), bn_beta=np.zeros(2),
                           bn_running_mean=np.zeros(2), bn_running_var=np.ones(2),
                           bn_momentum=0.1)
    batch_mean = x.mean(axis=(0, 2, 3))
    batch_var = x.var(axis=(0, 2, 3))
    layers.batchnorm(x, p, "train")
    assert np.allclose(p.bn_running_mean, 0.1 * batch_mean, atol=1e-12)
    assert np.allclose(p.bn_running_var, 0.9 + 0.1 * batch_var, atol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    rng = Rng(23)
    x = rng.normal((2, 2, 4, 4))
    p = layers.LayerParams(bn_gamma=np.full(2, 2.0), bn_beta=np.full(2, 0.5),
                           bn_running_mean=np.array([1.0, -1.0]),
                           bn_running_var=np.array([4.0, 0.25]))
    y, cache = layers.batchnorm(x, p, "eval")
    want = 2.0 * (x - p.bn_running_mean[None, :, None, None]) / np.sqrt(
        p.bn_running_var[None, :, None, None] + p.bn_eps) + 0.5
    assert np.allclose(y, want, atol=1e-12)
    assert cache is None
    with pytest.raises(StateError):
        layers.batchnorm_backward(cache, np.zeros_like(x))


def test_batchnorm_gradients():
    res = gradcheck.check_batchnorm()
    assert all(err < 1e-5 for err in res.values()), res


def test_relu_forward_and_zero_gradient_at_zero():
    x = np.array([[-1.0, 0.0, 2.0]])
    y, cache = layers.relu(x)
    assert y.tolist() == [[0.0, 0.0, 2.0]]
    dx = layers.relu_backward(cache, np.ones_like(x))
    assert dx.tolist() == [[0.0, 0.0, 1.0]]


def test_maxpool_values_and_tie_break():
    x = np.zeros((1, 1, 2, 4))
    x[0, 0] = [[5.0, 5.0, 1.0, 2.0],
               [5.0, 5.0, 4.0, 3.0]]
    y, cache = layers.maxpool2(x)
    assert y[0, 0].tolist() == [[5.0, 4.0]]
    dx = layers.maxpool2_backward(cache, np.ones_like(y))
    # the 4-way tie routes all gradient to the first window position
    assert dx[0, 0].tolist() == [[1.0, 0.0, 0.0, 0.0],
                                 [0.0, 0.0, 1.0, 0.0]]


def test_maxpool_requires_even_dims():
    with pytest.raises(SizeError):
        layers.maxpool2(np.zeros((1, 1, 3, 4)))


def test_maxpool_gradients():
    res = gradcheck.check_maxpool()
    assert all(err < 1e-6 for err in res.values()), res


def test_bilinear_constant_preserved():
    x = np.full((1, 1, 4, 4), 3.25)
    y, _ = layers.bilinear_up2(x)
    assert y.shape == (1, 1, 8, 8)
    assert np.allclose(y, 3.25, atol=1e-14)


def test_bilinear_is_linear_map():
    rng = Rng(31)
    a = rng.normal((2, 3, 4, 5))
    b = rng.normal((2, 3, 4, 5))
    ya, _ = layers.bilinear_up2(a)
    yb, _ = layers.bilinear_up2(b)
    yab, _ = layers.bilinear_up2(2.0 * a - 0.5 * b)
    assert np.allclose(yab, 2.0 * ya - 0.5 * yb, atol=1e-12)


def test_bilinear_backward_is_adjoint():
    # <up(x), g> == <x, up_backward(g)> for random pairs: the backward pass
    # is exactly the transpose of the forward linear map.
    rng = Rng(32)
    x = rng.normal((1, 2, 5, 6))
    g = rng.child(1).normal((1, 2, 10, 12))
    y, cache = layers.bilinear_up2(x)
    xt = layers.bilinear_up2_backward(cache, g)
    assert abs(float((y * g).sum()) - float((x * xt).sum())) < 1e-10


def test_bilinear_gradients():
    res = gradcheck.check_bilinear()
    assert all(err < 1e-6 for err in res.values()), res


def test_softmax_properties():
    rng = Rng(41)
    x = rng.normal((2, 5, 3, 3), std=3.0)
    p, _ = layers.softmax(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p.min() > 0
    p_shift, _ = layers.softmax(x + 7.5)      # per-pixel constant shift
    assert np.allclose(p, p_shift, atol=1e-12)


def test_softmax_extreme_logits_stable():
    x = np.zeros((1, 3, 1, 1))
    x[0, :, 0, 0] = [800.0, -800.0, 0.0]
    p, _ = layers.softmax(x)
    assert np.isfinite(p).all()
    assert abs(p[0, 0, 0, 0] - 1.0) < 1e-12


def test_softmax_gradients():
    res = gradcheck.check_softmax()
    assert all(err < 1e-6 for err in res.values()), res
