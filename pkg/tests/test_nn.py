import itertools
import math

import numpy as np
import pytest

from layer_cases import LAYER_CHECKS
from rsaforge import nn


@pytest.mark.parametrize("layer", sorted(LAYER_CHECKS))
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(layer, seed):
    assert LAYER_CHECKS[layer](1000 + seed) == []


# --------------------------------------------------------------------------- conv2d


def test_conv_dot_product():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    w = np.ones((1, 1, 2, 2), np.float32)
    assert nn.conv2d_forward(x, w, np.zeros(1, np.float32)).tolist() == [[[[10.0]]]]


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4)).astype(np.float32)
    out = nn.conv2d_forward(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(out, x)


def _conv_oracle(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i, o, r, c in itertools.product(range(n), range(cout), range(ho), range(wo)):
        patch = xp[i, :, r * stride:r * stride + kh, c * stride:c * stride + kw]
        out[i, o, r, c] = np.sum(patch * w[o]) + b[o]
    return out


def test_conv_stride2_shape_and_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = nn.conv2d_forward(x, w, b, stride=2, padding=1)
    assert out.shape == (2, 4, 3, 3)
    np.testing.assert_allclose(out, _conv_oracle(x, w, b, 2, 1), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_conv_same_padding_preserves_size(k):
    x = np.zeros((1, 2, 9, 6), np.float32)
    out = nn.conv2d_forward(x, np.zeros((3, 2, k, k), np.float32), None, 1, (k - 1) // 2)
    assert out.shape == (1, 3, 9, 6)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channels"):
        nn.conv2d_forward(np.zeros((1, 2, 4, 4), np.float32), np.zeros((1, 3, 3, 3), np.float32), None)
    with pytest.raises(ValueError, match="no output"):
        nn.conv2d_forward(np.zeros((1, 1, 2, 2), np.float32), np.zeros((1, 1, 3, 3), np.float32), None)


# --------------------------------------------------------------------------- batch norm


def test_batchnorm_standardized_input_passes_through():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    x = (x * np.sqrt(1 - nn.BN_EPS)).astype(np.float32)  # variance + eps == 1
    out = nn.batchnorm2d_forward(x, nn.BatchNormState.fresh(2), training=True)
    assert np.abs(out - x).max() < 1e-5


def test_batchnorm_zero_gamma_gives_beta():
    x = np.random.default_rng(1).standard_normal((3, 2, 2, 2)).astype(np.float32)
    bn = nn.BatchNormState.fresh(2)
    bn.gamma[...] = 0
    bn.beta[...] = [0.5, -2.0]
    out = nn.batchnorm2d_forward(x, bn, True)
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -2.0)


def test_batchnorm_output_moments():
    x = (np.random.default_rng(2).standard_normal((8, 3, 4, 4)) * 5 + 3).astype(np.float32)
    out = nn.batchnorm2d_forward(x, nn.BatchNormState.fresh(3), True).astype(np.float64)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_batchnorm_running_stats_update_and_eval():
    x = (np.random.default_rng(3).standard_normal((4, 1, 2, 2)) + 2).astype(np.float32)
    bn = nn.BatchNormState.fresh(1)
    nn.batchnorm2d_forward(x, bn, True)
    m, v = x.mean(dtype=np.float64), x.var(dtype=np.float64)
    assert bn.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * m, rel=1e-6)
    assert bn.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * v, rel=1e-6)
    out = nn.batchnorm2d_forward(x, bn, False)
    expected = (x - bn.running_mean[0]) / np.sqrt(bn.running_var[0] + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-5)


def test_batchnorm_eval_needs_running_stats():
    bn = nn.BatchNormState(np.ones(1, np.float32), np.zeros(1, np.float32), None, None)
    with pytest.raises(ValueError, match="running"):
        nn.batchnorm2d_forward(np.zeros((1, 1, 2, 2), np.float32), bn, False)


# --------------------------------------------------------------------------- relu / residual


def test_relu_values_and_gate():
    x = np.array([-1.0, 0.0, 2.0], np.float32)
    assert nn.relu_forward(x).tolist() == [0, 0, 2]
    assert nn.relu_backward(x, np.ones(3, np.float32)).tolist() == [0, 0, 1]


def test_relu_all_negative():
    x = -np.abs(np.random.default_rng(0).standard_normal(10)).astype(np.float32) - 0.1
    assert not nn.relu_forward(x).any()
    assert not nn.relu_backward(x, np.ones_like(x)).any()


def test_residual_add():
    rng = np.random.default_rng(0)
    a, s = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    assert np.array_equal(nn.residual_add_forward(a, np.zeros_like(a)), a)
    assert np.array_equal(nn.residual_add_forward(np.zeros_like(s), s), s)
    up = rng.standard_normal((2, 3))
    da, ds = nn.residual_add_backward(up)
    assert np.array_equal(da, up) and np.array_equal(ds, up)
    with pytest.raises(ValueError):
        nn.residual_add_forward(a, s[:1])


# --------------------------------------------------------------------------- pooling


def test_maxpool_2x2():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    out, _ = nn.maxpool2d_forward(x, 2, 2)
    assert out.tolist() == [[[[4.0]]]]


def test_maxpool_tie_goes_to_first():
    x = np.full((1, 1, 2, 2), 3.0, np.float32)
    out, arg = nn.maxpool2d_forward(x, 2, 2)
    assert out.tolist() == [[[[3.0]]]]
    dx = nn.maxpool2d_backward(x.shape, arg, np.ones((1, 1, 1, 1), np.float32), 2, 2)
    assert dx.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def _maxpool_oracle(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i, ch, r, col in itertools.product(range(n), range(c), range(ho), range(wo)):
        vals = [x[i, ch, y, z]
                for y in range(r * stride - pad, r * stride - pad + k)
                for z in range(col * stride - pad, col * stride - pad + k)
                if 0 <= y < h and 0 <= z < w]
        out[i, ch, r, col] = max(vals)
    return out


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((1, 1, 4, 4), 3, 2, 1),
    ((2, 3, 5, 7), 2, 1, 0),
    ((1, 2, 6, 6), 3, 3, 1),
    ((1, 1, 32, 32), 3, 2, 1),
])
def test_maxpool_brute_force(shape, k, stride, pad):
    x = np.random.default_rng(sum(shape)).standard_normal(shape).astype(np.float32)
    out, _ = nn.maxpool2d_forward(x, k, stride, pad)
    assert np.array_equal(out, _maxpool_oracle(x, k, stride, pad))
    if shape == (1, 1, 4, 4):
        assert out.shape == (1, 1, 2, 2)


def test_avgpool():
    assert nn.global_avgpool_forward(np.full((1, 2, 3, 3), 5.0, np.float32)).tolist() == [[5, 5]]
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert nn.global_avgpool_forward(x).tolist() == [[2.5]]
    dx = nn.global_avgpool_backward(x.shape, np.ones((1, 1), np.float32))
    assert dx.tolist() == [[[[0.25, 0.25], [0.25, 0.25]]]]


# --------------------------------------------------------------------------- linear / loss


def test_linear_examples():
    x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    assert np.array_equal(nn.linear_forward(x, np.eye(4, dtype=np.float32), np.zeros(4, np.float32)), x)
    out = nn.linear_forward(np.array([[2, 3]], np.float32), np.array([[1, 1]], np.float32),
                            np.array([1], np.float32))
    assert out.tolist() == [[6.0]]
    with pytest.raises(ValueError):
        nn.linear_forward(x, np.zeros((2, 3), np.float32), None)


def test_softmax_xent_symmetric():
    loss, probs = nn.softmax_xent_forward(np.zeros((1, 2), np.float32), [1])
    assert probs.tolist() == [[0.5, 0.5]]
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_softmax_xent_stable():
    loss, probs = nn.softmax_xent_forward(np.array([[1000.0, 0.0]], np.float32), [0])
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(probs).all()


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    logits = (rng.standard_normal((50, 7)) * 10).astype(np.float32)
    loss, probs = nn.softmax_xent_forward(logits, rng.integers(0, 7, 50))
    assert np.abs(probs.sum(axis=1, dtype=np.float64) - 1).max() < 1e-6
    assert loss >= 0


def test_softmax_label_range():
    with pytest.raises(ValueError, match="labels"):
        nn.softmax_xent_forward(np.zeros((1, 3), np.float32), [3])
