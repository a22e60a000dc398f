"""Pure-numpy conv1d / maxpool1d kernels (fallback for ``_ckernels``)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad)))


def conv1d_forward(x, w, b, stride, pad):
    k = w.shape[2]
    # (n, cin, lout, k)
    win = sliding_window_view(_pad(x, pad), k, axis=2)[:, :, ::stride, :]
    out = np.einsum("nitj,oij->not", win, w, optimize=True)
    out += b[None, :, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv1d_backward(dout, x, w, stride, pad):
    n, cin, L = x.shape
    k = w.shape[2]
    lout = dout.shape[2]
    win = sliding_window_view(_pad(x, pad), k, axis=2)[:, :, ::stride, :]
    dw = np.einsum("not,nitj->oij", dout, win, optimize=True)
    db = dout.sum(axis=(0, 2))
    dxp = np.zeros((n, cin, L + 2 * pad), dtype=x.dtype)
    stop = stride * (lout - 1) + 1
    for j in range(k):
        dxp[:, :, j:j + stop:stride] += np.einsum("not,oi->nit", dout, w[:, :, j])
    dx = dxp[:, :, pad:pad + L]
    return np.ascontiguousarray(dx), dw.astype(x.dtype), db.astype(x.dtype)


def maxpool1d_forward(x, k, stride):
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride, :]
    # argmax returns the first maximal index, which is the tie rule
    local = win.argmax(axis=3)
    lout = win.shape[2]
    idx = local + (np.arange(lout) * stride)[None, None, :]
    out = np.take_along_axis(x, idx, axis=2)
    return np.ascontiguousarray(out), idx.astype(np.intp)


def maxpool1d_backward(dout, idx, length):
    n, c, _ = dout.shape
    dx = np.zeros((n, c, length), dtype=dout.dtype)
    # overlapping windows may share an argmax, so accumulate
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (ni[:, :, None], ci[:, :, None], idx), dout)
    return dx
