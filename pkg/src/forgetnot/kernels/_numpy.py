"""Pure-numpy reference kernels.

These are the fallback implementations used when numba is unavailable or
disabled via ``FORGETNOT_NUMBA=0``. They are also the ground truth the
numba kernels are tested against.
"""

import numpy as np


def _im2col(xp, kh, kw):
    """View a padded NCHW tensor as columns [B, Ho, Wo, C, kh, kw]."""
    b, c, hp, wp = xp.shape
    ho = hp - kh + 1
    wo = wp - kw + 1
    sb, sc, sh, sw = xp.strides
    shape = (b, ho, wo, c, kh, kw)
    strides = (sb, sh, sw, sc, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv2d_forward(x, w, bias, pad):
    """3x3/1x1 convolution, stride 1. x: [B,C,H,W], w: [Co,C,K,K]."""
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw)
    b, ho, wo = cols.shape[:3]
    cols = cols.reshape(b * ho * wo, ci * kh * kw)
    y = cols @ w.reshape(co, -1).T
    y = y.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        y += bias[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward_input(dy, w, x_shape, pad):
    """Gradient of conv2d_forward w.r.t. its input."""
    co, ci, kh, kw = w.shape
    b, _, h, wd = x_shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dcols = dy_mat @ w.reshape(co, -1)
    ho, wo = dy.shape[2], dy.shape[3]
    dcols = dcols.reshape(b, ho, wo, ci, kh, kw)
    dxp = np.zeros((b, ci, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def conv2d_backward_weights(dy, x, w_shape, pad):
    """Gradient of conv2d_forward w.r.t. the filters (and bias)."""
    co, ci, kh, kw = w_shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw)
    b, ho, wo = cols.shape[:3]
    cols = cols.reshape(b * ho * wo, ci * kh * kw)
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (dy_mat.T @ cols).reshape(w_shape)
    dbias = dy.sum(axis=(0, 2, 3))
    return dw, dbias


def knn_kth_distance(query, ref, k, exclude_self):
    """Euclidean distance from each query row to its k-th nearest ref row.

    With exclude_self=True the zero distance of a point to itself is
    skipped, i.e. the k-th neighbour among the *other* rows is returned.
    """
    n = query.shape[0]
    out = np.empty(n, dtype=np.float64)
    chunk = max(1, int(2**22 // max(ref.shape[0], 1)))
    rank = k if exclude_self else k - 1
    for start in range(0, n, chunk):
        q = query[start:start + chunk]
        d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        part = np.partition(d2, rank, axis=1)[:, rank]
        out[start:start + chunk] = np.sqrt(part)
    return out
