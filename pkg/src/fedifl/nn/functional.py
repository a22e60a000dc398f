"""Stateless forward/backward primitives.

Every forward returns ``(output, cache)``; the matching backward takes the
upstream gradient and that cache and returns a dict of gradients keyed by
parameter name plus ``"input"``. Inputs are never modified.
"""

from __future__ import annotations

import numpy as np

from fedifl.nn import kernels


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        super().__init__(message)
        self.shapes = shapes


def _same_pad(k: int) -> int:
    return (k - 1) // 2


def conv1d(x, kernel, bias, stride: int = 1, padding: str = "same"):
    """1-D cross-correlation over ``(batch, in_ch, length)``.

    ``padding="same"`` pads ``(k - 1) // 2`` on both sides, so the length is
    preserved at stride 1; ``"none"`` is a valid correlation.
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(
            f"conv1d expects 3-d input and kernel, got {x.shape} and {kernel.shape}",
            x.shape, kernel.shape,
        )
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv1d input channels {x.shape[1]} (input {x.shape}) do not match "
            f"kernel {kernel.shape}",
            x.shape, kernel.shape,
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv1d bias {bias.shape} vs kernel {kernel.shape}", bias.shape, kernel.shape)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    k = kernel.shape[2]
    if padding == "same":
        pad = _same_pad(k)
    elif padding == "none":
        pad = 0
        if x.shape[2] < k:
            raise ShapeError(f"input length {x.shape[2]} shorter than kernel {k}", x.shape, kernel.shape)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    x = np.ascontiguousarray(x)
    kernel = np.ascontiguousarray(kernel, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    out = kernels.conv1d_forward(x, kernel, bias, stride, pad)
    return out, (x, kernel, stride, pad)


def conv1d_backward(upstream, cache):
    x, kernel, stride, pad = cache
    lout = (x.shape[2] + 2 * pad - kernel.shape[2]) // stride + 1
    expected = (x.shape[0], kernel.shape[0], lout)
    if upstream.shape != expected:
        raise ShapeError(f"upstream {upstream.shape} does not match conv output {expected}",
                         upstream.shape, expected)
    up = np.ascontiguousarray(upstream, dtype=x.dtype)
    dx, dw, db = kernels.conv1d_backward(up, x, kernel, stride, pad)
    return {"input": dx, "kernel": dw, "bias": db}


def maxpool1d(x, k: int = 2, stride: int = 2):
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool kernel and stride must be positive, got k={k}, stride={stride}")
    if x.ndim != 3 or x.shape[2] < k:
        raise ShapeError(f"maxpool1d needs (batch, ch, L>= {k}) input, got {x.shape}", x.shape)
    x = np.ascontiguousarray(x)
    out, idx = kernels.maxpool1d_forward(x, k, stride)
    return out, (idx, x.shape[2])


def maxpool1d_backward(upstream, cache):
    idx, length = cache
    if upstream.shape != idx.shape:
        raise ShapeError(f"upstream {upstream.shape} vs pooled {idx.shape}", upstream.shape, idx.shape)
    dx = kernels.maxpool1d_backward(np.ascontiguousarray(upstream), idx, length)
    return {"input": dx}


def _bn_view(x):
    # (batch, ch) inputs are treated as length-1 sequences
    return x[:, :, None] if x.ndim == 2 else x


def batchnorm1d(x, gain, shift, running_mean, running_var, mode: str = "train",
                momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalisation over batch and length axes.

    In train mode the running statistics are updated in place (exponential
    moving average with weight ``momentum`` on the new batch; unbiased
    variance) and returned unchanged in eval mode.
    """
    x3 = _bn_view(x)
    if x3.shape[1] != gain.shape[0]:
        raise ShapeError(f"batchnorm channels {gain.shape[0]} vs input {x.shape}", gain.shape, x.shape)
    if mode == "train":
        m = x3.shape[0] * x3.shape[2]
        if x3.shape[0] < 2:
            raise ValueError("batchnorm1d in train mode needs a batch of at least 2")
        mean = x3.mean(axis=(0, 2))
        var = x3.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x3 - mean[None, :, None]) * inv_std[None, :, None]
    out = gain[None, :, None] * xhat + shift[None, :, None]
    out = out.astype(x.dtype, copy=False)
    if x.ndim == 2:
        out = out[:, :, 0]
    return out, (xhat, inv_std, gain, mode, x.ndim)


def batchnorm1d_backward(upstream, cache):
    xhat, inv_std, gain, mode, ndim = cache
    dy = _bn_view(upstream)
    if dy.shape != xhat.shape:
        raise ShapeError(f"upstream {upstream.shape} vs batchnorm output {xhat.shape}", upstream.shape, xhat.shape)
    dgain = (dy * xhat).sum(axis=(0, 2))
    dshift = dy.sum(axis=(0, 2))
    dxhat = dy * gain[None, :, None]
    if mode == "train":
        m = xhat.shape[0] * xhat.shape[2]
        dx = (inv_std[None, :, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2))[None, :, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
        )
    else:
        dx = dxhat * inv_std[None, :, None]
    dx = dx.astype(upstream.dtype, copy=False)
    if ndim == 2:
        dx = dx[:, :, 0]
    return {"input": dx, "gain": dgain, "shift": dshift}


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(upstream, mask):
    # subgradient 0 at x == 0
    return {"input": np.where(mask, upstream, 0).astype(upstream.dtype, copy=False)}


def fc(x, weight, bias):
    """Affine map ``x @ W.T + b`` with ``W`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc input {x.shape} incompatible with weight {weight.shape}", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"fc bias {bias.shape} vs weight {weight.shape}", bias.shape, weight.shape)
    return x @ weight.T + bias, (x, weight)


def fc_backward(upstream, cache):
    x, weight = cache
    if upstream.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"upstream {upstream.shape} vs fc output {(x.shape[0], weight.shape[0])}",
                         upstream.shape)
    return {"input": upstream @ weight, "weight": upstream.T @ x, "bias": upstream.sum(axis=0)}


def softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(upstream, probs, axis: int = -1):
    inner = (upstream * probs).sum(axis=axis, keepdims=True)
    return {"input": probs * (upstream - inner)}


def log_softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(upstream, out):
    return {"input": upstream * out * (1 - out)}
