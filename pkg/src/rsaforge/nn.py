"""Hand-written forward and backward kernels for the ResNet layer types.

Every kernel is a pure function of its inputs. ``*_forward`` returns the layer
output; ``*_backward`` takes the forward input plus the upstream gradient and
returns the gradient with respect to the input followed by parameter gradients.
Arrays are NCHW float32 unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_size(n: int, k: int, stride: int, padding: int, what: str) -> int:
    # floor semantics: trailing rows/cols that do not fill a window are dropped
    span = n + 2 * padding - k
    if span < 0 or stride < 1:
        raise ValueError(
            f"{what}: input {n} with kernel {k}, stride {stride}, padding {padding} "
            "gives no output"
        )
    return span // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view ``[N, C, Ho, Wo, kh, kw]`` of a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


# --------------------------------------------------------------------------- conv


def _im2col(x, kh, kw, stride, padding):
    n, c = x.shape[:2]
    win = _windows(_pad(x, padding), kh, kw, stride)
    ho, wo = win.shape[2:4]
    # rows: (n, ho, wo); columns: (c, kh, kw) to match the weight layout
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x [N,Cin,H,W]`` with ``weight [Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    _out_size(x.shape[2], kh, stride, padding, "conv2d height")
    _out_size(x.shape[3], kw, stride, padding, "conv2d width")
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, weight, dout, stride=1, padding=0, with_bias=True):
    """Return ``(dx, dweight, dbias)``; ``dbias`` is None when ``with_bias`` is false."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0, dtype=np.float64).astype(x.dtype) if with_bias else None
    dcols = (d2 @ weight.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dweight, dbias


# --------------------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None
    running_var: np.ndarray | None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int) -> BatchNormState:
        return cls(
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
        )


def _batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(x - mean.astype(x.dtype)[None, :, None, None]).mean(axis=(0, 2, 3),
                                                                        dtype=np.float64)
    return mean, var


def batchnorm2d_forward(x: np.ndarray, bn: BatchNormState, training: bool) -> np.ndarray:
    """Normalize per channel. In training mode the running statistics are updated in place."""
    if training:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise ValueError("batchnorm2d needs at least two values per channel in training mode")
        mean, var = _batch_moments(x)
        m = bn.momentum
        bn.running_mean = ((1 - m) * bn.running_mean + m * mean).astype(np.float32)
        bn.running_var = ((1 - m) * bn.running_var + m * var).astype(np.float32)
    else:
        if bn.running_mean is None or bn.running_var is None:
            raise ValueError("batchnorm2d in eval mode needs initialized running statistics")
        mean, var = bn.running_mean.astype(np.float64), bn.running_var.astype(np.float64)
    scale = (bn.gamma / np.sqrt(var + bn.eps)).astype(x.dtype)
    shift = (bn.beta - mean * scale).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm2d_backward(x: np.ndarray, bn: BatchNormState, dout: np.ndarray):
    """Training-mode gradient; returns ``(dx, dgamma, dbeta)``."""
    mean, var = _batch_moments(x)
    inv_std = (1.0 / np.sqrt(var + bn.eps)).astype(x.dtype)[None, :, None, None]
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std
    axes = (0, 2, 3)
    dbeta = dout.sum(axis=axes, dtype=np.float64)
    dgamma = (dout * xhat).sum(axis=axes, dtype=np.float64)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    g = bn.gamma.astype(x.dtype)[None, :, None, None]
    dx = (g * inv_std / m) * (
        m * dout
        - dbeta.astype(x.dtype)[None, :, None, None]
        - xhat * dgamma.astype(x.dtype)[None, :, None, None]
    )
    return dx, dgamma.astype(x.dtype), dbeta.astype(x.dtype)


def batchnorm2d_eval_backward(bn: BatchNormState, dout: np.ndarray):
    """Gradient through eval-mode batch norm (fixed running statistics)."""
    scale = (bn.gamma / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)).astype(dout.dtype)
    return dout * scale[None, :, None, None]


# --------------------------------------------------------------------------- elementwise


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dout, 0).astype(dout.dtype)


def residual_add_forward(block_out: np.ndarray, skip: np.ndarray) -> np.ndarray:
    if block_out.shape != skip.shape:
        raise ValueError(f"residual_add shape mismatch: {block_out.shape} vs {skip.shape}")
    return block_out + skip


def residual_add_backward(dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dout, dout


# --------------------------------------------------------------------------- pooling


def maxpool2d_forward(x: np.ndarray, k: int, stride: int, padding: int = 0):
    """Window maximum with ``-inf`` padding. Returns ``(out, argmax)``.

    ``argmax`` holds the flat in-window index of the first maximum and is what
    the backward pass routes gradient through.
    """
    _out_size(x.shape[2], k, stride, padding, "maxpool2d height")
    _out_size(x.shape[3], k, stride, padding, "maxpool2d width")
    win = _windows(_pad(x, padding, -np.inf), k, k, stride)
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2d_backward(x_shape, argmax: np.ndarray, dout: np.ndarray,
                       k: int, stride: int, padding: int = 0) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = argmax.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            hit = argmax == i * k + j
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += np.where(hit, dout, 0)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


def global_avgpool_backward(x_shape, dout: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], x_shape).astype(dout.dtype)


# --------------------------------------------------------------------------- dense + loss


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` of shape ``[K, D]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out += bias
    return out


def linear_backward(x, weight, dout, with_bias=True):
    dx = dout @ weight
    dweight = dout.T @ x
    dbias = dout.sum(axis=0, dtype=np.float64).astype(dout.dtype) if with_bias else None
    return dx, dweight, dbias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_forward(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, probs)``; probabilities are float32, the loss a Python float.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), labels] - log_norm
    probs = np.exp(z - log_norm[:, None])
    return float(-log_p.mean()), probs.astype(logits.dtype)


def softmax_xent_backward(probs: np.ndarray, labels) -> np.ndarray:
    n = probs.shape[0]
    grad = probs.astype(np.float64)
    grad[np.arange(n), np.asarray(labels)] -= 1.0
    return (grad / n).astype(probs.dtype)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
