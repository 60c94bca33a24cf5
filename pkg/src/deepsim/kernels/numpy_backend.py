"""Pure-NumPy convolution and pooling kernels.

Always available; serves both as the import-time fallback when the compiled
extension is missing and as the reference the extension is tested against.
Convolution is an im2col gather followed by one BLAS matmul, which is the
fastest portable strategy at the image sizes this engine targets.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_dim(size, kernel, stride, padding):
    """floor((size + 2*padding - kernel) / stride) + 1"""
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_dim(size, kernel, stride, ceil_mode=False):
    """Output extent of max pooling; ceil_mode counts clipped end windows.

    In ceil mode a window is only counted if it starts inside the input,
    matching the common framework convention.
    """
    if size < kernel:
        return 1 if ceil_mode else 0
    if ceil_mode:
        out = (size - kernel + stride - 1) // stride + 1
        if (out - 1) * stride >= size:
            out -= 1
        return out
    return (size - kernel) // stride + 1


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D cross-correlation over a CHW float32 tensor.

    x: (C_in, H, W); weight: (C_out, C_in, kh, kw); bias: (C_out,).
    Zero padding; output dims follow :func:`conv_output_dim`.
    """
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    oh = conv_output_dim(h, kh, stride, padding)
    ow = conv_output_dim(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: {h}x{w} input with kernel {kh}x{kw}, stride {stride}, "
            f"padding {padding} yields empty {oh}x{ow} output")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
    out = cols @ weight.reshape(cout, -1).T + bias
    return np.ascontiguousarray(out.T.reshape(cout, oh, ow), dtype=np.float32)


def maxpool2d(x, kernel, stride, ceil_mode=False):
    """Max pooling over a CHW float32 tensor (square window, no padding)."""
    c, h, w = x.shape
    oh = pool_output_dim(h, kernel, stride, ceil_mode)
    ow = pool_output_dim(w, kernel, stride, ceil_mode)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"maxpool2d: {h}x{w} input with window {kernel}, stride {stride} "
            f"yields empty {oh}x{ow} output")
    span_h = (oh - 1) * stride + kernel
    span_w = (ow - 1) * stride + kernel
    if span_h > h or span_w > w:
        # ceil mode: end windows are clipped; -inf never wins a max
        x = np.pad(x, ((0, 0), (0, span_h - h), (0, span_w - w)),
                   constant_values=-np.inf)
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.max(axis=(3, 4)), dtype=np.float32)
