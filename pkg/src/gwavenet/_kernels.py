"""Compiled inner loops for 2-d correlation.

All kernels accumulate in float64 with a fixed (channel, row-offset,
col-offset) summation order, so results are bit-reproducible across calls
and independent of how a batch is split.  Inputs are float32: a product of
two float32 values is exact in float64, so streaming the smaller dtype
changes nothing numerically.  Parallelism is over disjoint output slices
(samples or filters) -- no cross-thread reductions.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def corr2d(xp, w, out):
    # xp: [n, c, oh+k-1, ow+k-1] float32 (pre-padded)
    # w:  [f, c, k, k] float64
    # out: [n, f, oh, ow] float64, zero-initialised by the caller
    n = xp.shape[0]
    c = xp.shape[1]
    f = w.shape[0]
    k = w.shape[2]
    oh = out.shape[2]
    ow = out.shape[3]
    for ni in prange(n):
        for hi in range(oh):
            for ci in range(c):
                for dy in range(k):
                    xrow = xp[ni, ci, hi + dy]
                    for fi in range(f):
                        orow = out[ni, fi, hi]
                        wrow = w[fi, ci, dy]
                        for dx in range(k):
                            wv = wrow[dx]
                            for wi in range(ow):
                                orow[wi] += wv * np.float64(xrow[wi + dx])


@njit(cache=True, parallel=True)
def corr2d_wgrad(xp, dyp, dw, w2, oh):
    # xp:  [n, c, oh+k, w2] float32 (padded, one sacrificial zero row)
    # dyp: [n, f, oh, w2] float32 (output grad, zero-extended to width w2)
    # dw:  [f, c, k, k] float64, zero-initialised
    # Each thread owns one filter slice, so the accumulation order is fixed:
    # samples ascending, then 8 interleaved lanes folded in lane order.
    n = xp.shape[0]
    c = xp.shape[1]
    f = dyp.shape[1]
    k = dw.shape[2]
    ln = oh * w2
    ln8 = (ln // 8) * 8
    for fi in prange(f):
        lanes = np.empty(8, np.float64)
        for ci in range(c):
            for dy in range(k):
                for dx in range(k):
                    off = dy * w2 + dx
                    acc = 0.0
                    for ni in range(n):
                        df = dyp[ni, fi].reshape(-1)
                        xf = xp[ni, ci].reshape(-1)
                        for la in range(8):
                            lanes[la] = 0.0
                        for j0 in range(0, ln8, 8):
                            for la in range(8):
                                lanes[la] += np.float64(df[j0 + la]) * np.float64(xf[j0 + la + off])
                        tail = 0.0
                        for j in range(ln8, ln):
                            tail += np.float64(df[j]) * np.float64(xf[j + off])
                        for la in range(8):
                            acc += lanes[la]
                        acc += tail
                    dw[fi, ci, dy, dx] = acc
