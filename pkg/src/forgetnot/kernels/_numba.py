"""Numba-jitted hot kernels.

Convolutions use the shifted-window form: for every (oc, ic, kh, kw) the
kernel does one scalar-times-row accumulation over contiguous memory,
which LLVM vectorizes well on a single core. Outputs are written by
exactly one loop nest, so results are bit-deterministic run to run.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, fastmath=False)
def _pad_input(x, pad):
    b, ci, h, w = x.shape
    xp = np.zeros((b, ci, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


@njit(cache=True, fastmath=False)
def conv2d_forward(x, w, bias, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = h + 2 * pad - kh + 1
    wo = wd + 2 * pad - kw + 1
    xp = _pad_input(x, pad) if pad > 0 else x
    y = np.empty((b, co, ho, wo), dtype=x.dtype)
    for n in range(b):
        for oc in range(co):
            acc = np.full((ho, wo), bias[oc], dtype=x.dtype)
            for ic in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, ic, i, j]
                        for oh in range(ho):
                            xrow = xp[n, ic, oh + i]
                            arow = acc[oh]
                            for ow in range(wo):
                                arow[ow] += wv * xrow[ow + j]
            y[n, oc] = acc
    return y


@njit(cache=True, fastmath=False)
def conv2d_backward_input(dy, w, x_shape, pad):
    b, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    hp, wp = h + 2 * pad, wd + 2 * pad
    dxp = np.zeros((b, ci, hp, wp), dtype=dy.dtype)
    for n in range(b):
        for ic in range(ci):
            acc = dxp[n, ic]
            for oc in range(co):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, ic, i, j]
                        for oh in range(ho):
                            dyrow = dy[n, oc, oh]
                            arow = acc[oh + i]
                            for ow in range(wo):
                                arow[ow + j] += wv * dyrow[ow]
    if pad > 0:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])
    return dxp


@njit(cache=True, fastmath=False)
def conv2d_backward_weights(dy, x, w_shape, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w_shape
    ho, wo = dy.shape[2], dy.shape[3]
    xp = _pad_input(x, pad) if pad > 0 else x
    dw = np.zeros(w_shape, dtype=dy.dtype)
    dbias = np.zeros(co, dtype=dy.dtype)
    for n in range(b):
        for oc in range(co):
            bsum = 0.0
            for oh in range(ho):
                dyrow = dy[n, oc, oh]
                for ow in range(wo):
                    bsum += dyrow[ow]
                for ic in range(ci):
                    for i in range(kh):
                        xrow = xp[n, ic, oh + i]
                        for j in range(kw):
                            acc = 0.0
                            for ow in range(wo):
                                acc += dyrow[ow] * xrow[ow + j]
                            dw[oc, ic, i, j] += acc
            dbias[oc] += bsum
    return dw, dbias


@njit(cache=True, parallel=True, fastmath=False)
def knn_kth_distance(query, ref, k, exclude_self):
    n, d = query.shape
    m = ref.shape[0]
    rank = k if exclude_self else k - 1
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        best = np.full(rank + 1, np.inf)
        for j in range(m):
            dist = 0.0
            for c in range(d):
                diff = query[i, c] - ref[j, c]
                dist += diff * diff
            if dist < best[rank]:
                pos = rank
                while pos > 0 and best[pos - 1] > dist:
                    best[pos] = best[pos - 1]
                    pos -= 1
                best[pos] = dist
        out[i] = np.sqrt(best[rank])
    return out
