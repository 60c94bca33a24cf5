# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels (the hot path of every forward
pass).  Semantics match ``numpy_backend`` exactly; see there for the shape
rules."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d(x, weight, bias, int stride=1, int padding=0):
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: {h}x{w} input with kernel {kh}x{kw}, stride {stride}, "
            f"padding {padding} yields empty {oh}x{ow} output")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x, dtype=np.float32)
    weight = np.ascontiguousarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    # patch extraction in a tight loop, then one BLAS matmul: direct
    # scalar convolution loses to im2col + GEMM by an order of magnitude
    cols = np.empty((cin * kh * kw, oh * ow), dtype=np.float32)
    _im2col(x, kh, kw, stride, oh, ow, cols)
    out = np.empty((cout, oh * ow), dtype=np.float32)
    np.dot(weight.reshape(cout, -1), cols, out=out)
    out += bias[:, None]
    return out.reshape(cout, oh, ow)


cdef void _im2col(const float[:, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t oh, Py_ssize_t ow,
                  float[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t cin = x.shape[0]
    cdef Py_ssize_t ci, i, j, r, c, row, base
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for r in range(oh):
                    base = r * ow
                    for c in range(ow):
                        cols[row, base + c] = \
                            x[ci, r * stride + i, c * stride + j]


def maxpool2d(x, int kernel, int stride, bint ceil_mode=False):
    c, h, w = x.shape
    oh = _pool_dim(h, kernel, stride, ceil_mode)
    ow = _pool_dim(w, kernel, stride, ceil_mode)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"maxpool2d: {h}x{w} input with window {kernel}, stride {stride} "
            f"yields empty {oh}x{ow} output")
    x = np.ascontiguousarray(x, dtype=np.float32)
    out = np.empty((c, oh, ow), dtype=np.float32)
    _pool(x, kernel, stride, out)
    return out


def _pool_dim(Py_ssize_t size, Py_ssize_t kernel, Py_ssize_t stride,
              bint ceil_mode):
    # nonnegative numerator keeps C and Python division semantics identical
    if size < kernel:
        return 1 if ceil_mode else 0
    if ceil_mode:
        out = (size - kernel + stride - 1) // stride + 1
        if (out - 1) * stride >= size:
            out -= 1
        return out
    return (size - kernel) // stride + 1


cdef void _pool(const float[:, :, ::1] x, Py_ssize_t kernel,
                Py_ssize_t stride, float[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t oh = out.shape[1], ow = out.shape[2]
    cdef Py_ssize_t ch, r, col, i, j, r0, c0, r1, c1
    cdef float m, v
    for ch in range(c):
        for r in range(oh):
            r0 = r * stride
            r1 = r0 + kernel
            if r1 > h:
                r1 = h
            for col in range(ow):
                c0 = col * stride
                c1 = c0 + kernel
                if c1 > w:
                    c1 = w
                m = x[ch, r0, c0]
                for i in range(r0, r1):
                    for j in range(c0, c1):
                        v = x[ch, i, j]
                        if v > m:
                            m = v
                out[ch, r, col] = m
