"""Pure-NumPy convolution/pooling kernels (im2col + BLAS).

Fallback backend with the exact same contract as the compiled extension:
float64 C-contiguous NHWC arrays, 3x3 same-padded convolutions, 2x2
stride-2 max pooling with first-max-wins ties.  Pool indices encode the
argmax position inside each window row-major (0..3) so both backends
produce interchangeable caches.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """y[b,i,j,co] = bias + sum over the 3x3 neighborhood, zero-padded."""
    n, h, wd, ci = x.shape
    co = w.shape[3]
    xp = np.zeros((n, h + 2, wd + 2, ci))
    xp[:, 1:-1, 1:-1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n,h,w,ci,3,3)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * ci)
    y = cols @ w.reshape(9 * ci, co) + b
    return np.ascontiguousarray(y.reshape(n, h, wd, co))


def conv3x3_backward(x, w, dy):
    """Gradients (dx, dw, db) of the same-padded 3x3 convolution."""
    n, h, wd, ci = x.shape
    co = w.shape[3]
    xp = np.zeros((n, h + 2, wd + 2, ci))
    xp[:, 1:-1, 1:-1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * ci)
    dyf = dy.reshape(n * h * wd, co)
    dw = (cols.T @ dyf).reshape(3, 3, ci, co)
    db = dyf.sum(axis=0)
    dcols = (dyf @ w.reshape(9 * ci, co).T).reshape(n, h, wd, 3, 3, ci)
    dxp = np.zeros((n, h + 2, wd + 2, ci))
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh : kh + h, kw : kw + wd, :] += dcols[:, :, :, kh, kw, :]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :]), dw, db


def maxpool2_forward(x):
    """2x2 stride-2 max pool; returns (pooled, window argmax indices)."""
    n, h, wd, c = x.shape
    xr = np.ascontiguousarray(
        x.reshape(n, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    ).reshape(n, h // 2, wd // 2, 4, c)
    idx = xr.argmax(axis=3).astype(np.uint8)
    y = np.take_along_axis(xr, idx[:, :, :, np.newaxis, :].astype(np.int64), axis=3)
    return np.ascontiguousarray(y[:, :, :, 0, :]), idx


def maxpool2_backward(dy, idx):
    """Route each pooled gradient back to its window's argmax cell."""
    n, hh, wh, c = dy.shape
    dxr = np.zeros((n, hh, wh, 4, c))
    np.put_along_axis(
        dxr, idx[:, :, :, np.newaxis, :].astype(np.int64), dy[:, :, :, np.newaxis, :], axis=3
    )
    dx = dxr.reshape(n, hh, wh, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(dx.reshape(n, hh * 2, wh * 2, c))
