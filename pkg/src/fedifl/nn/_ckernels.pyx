# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv1d / maxpool1d kernels.

Same signatures and results as ``_pykernels``; the caller validates shapes.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
cimport scipy.linalg.cython_blas as blas

cnp.import_array()


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k, floating alpha,
                       floating* a, int lda, floating* b, int ldb, floating beta,
                       floating* c, int ldc) noexcept nogil:
    # column-major BLAS; callers pass row-major operands in swapped order
    if floating is float:
        blas.sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        blas.dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _im2col(const floating[:, :, ::1] x, Py_ssize_t bi, Py_ssize_t k, int stride,
                  int pad, Py_ssize_t lout, floating[:, ::1] cols) noexcept nogil:
    # cols[(i, j), t] = x[bi, i, t*stride + j - pad], zero outside
    cdef Py_ssize_t cin = x.shape[1], L = x.shape[2], i, j, t, pos
    for i in range(cin):
        for j in range(k):
            for t in range(lout):
                pos = t * stride + j - pad
                if 0 <= pos < L:
                    cols[i * k + j, t] = x[bi, i, pos]
                else:
                    cols[i * k + j, t] = 0


def conv1d_forward(const floating[:, :, ::1] x, const floating[:, :, ::1] w,
                   const floating[::1] b, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t lout = (L + 2 * pad - k) // stride + 1
    cdef Py_ssize_t bi, o, t
    cdef int ck = <int>(cin * k)
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, cout, lout), dtype=dtype)
    cols_arr = np.empty((cin * k, lout), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, ::1] cols = cols_arr
    with nogil:
        for bi in range(n):
            _im2col(x, bi, k, stride, pad, lout, cols)
            for o in range(cout):
                for t in range(lout):
                    out[bi, o, t] = b[o]
            _gemm(b"N", b"N", <int>lout, <int>cout, ck, 1, &cols[0, 0], <int>lout,
                  <floating*>&w[0, 0, 0], ck, 1, &out[bi, 0, 0], <int>lout)
    return out_arr


def conv1d_backward(const floating[:, :, ::1] dout, const floating[:, :, ::1] x,
                    const floating[:, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t lout = dout.shape[2]
    cdef Py_ssize_t bi, o, i, t, j, pos
    cdef int ck = <int>(cin * k)
    cdef floating acc
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n, cin, L), dtype=dtype)
    dw_arr = np.zeros((cout, cin, k), dtype=dtype)
    db_arr = np.zeros(cout, dtype=dtype)
    cols_arr = np.empty((cin * k, lout), dtype=dtype)
    dcols_arr = np.empty((cin * k, lout), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef floating[:, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[:, ::1] dcols = dcols_arr
    with nogil:
        for bi in range(n):
            for o in range(cout):
                acc = 0
                for t in range(lout):
                    acc = acc + dout[bi, o, t]
                db[o] += acc
            _im2col(x, bi, k, stride, pad, lout, cols)
            # dW += dout_b @ cols.T
            _gemm(b"T", b"N", ck, <int>cout, <int>lout, 1, &cols[0, 0], <int>lout,
                  <floating*>&dout[bi, 0, 0], <int>lout, 1, &dw[0, 0, 0], ck)
            # dcols = W.T @ dout_b
            _gemm(b"N", b"T", <int>lout, ck, <int>cout, 1, <floating*>&dout[bi, 0, 0], <int>lout,
                  <floating*>&w[0, 0, 0], ck, 0, &dcols[0, 0], <int>lout)
            for i in range(cin):
                for j in range(k):
                    for t in range(lout):
                        pos = t * stride + j - pad
                        if 0 <= pos < L:
                            dx[bi, i, pos] += dcols[i * k + j, t]
    return dx_arr, dw_arr, db_arr


def maxpool1d_forward(const floating[:, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t lout = (L - k) // stride + 1
    cdef Py_ssize_t bi, ci, t, j, best
    cdef floating m
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, lout), dtype=dtype)
    idx_arr = np.empty((n, c, lout), dtype=np.intp)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, ::1] idx = idx_arr
    for bi in range(n):
        for ci in range(c):
            for t in range(lout):
                best = t * stride
                m = x[bi, ci, best]
                for j in range(1, k):
                    # strict '>' keeps the first maximal index on ties
                    if x[bi, ci, t * stride + j] > m:
                        best = t * stride + j
                        m = x[bi, ci, best]
                out[bi, ci, t] = m
                idx[bi, ci, t] = best
    return out_arr, idx_arr


def maxpool1d_backward(const floating[:, :, ::1] dout, const Py_ssize_t[:, :, ::1] idx,
                       Py_ssize_t length):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], lout = dout.shape[2]
    cdef Py_ssize_t bi, ci, t
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n, c, length), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    for bi in range(n):
        for ci in range(c):
            for t in range(lout):
                dx[bi, ci, idx[bi, ci, t]] += dout[bi, ci, t]
    return dx_arr
