"""Compiled helpers for the convolutional feature extractor.

Layouts are channels-last. Second-stage im2col columns are ordered
``tap * c_in + channel`` with ``tap = 3 * di + dj``.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def pool_im2col(a1, q1, s2, pad):
    """2x2 average pool of ``a1`` followed by 3x3 im2col with ``pad`` zero border."""
    n = a1.shape[0]
    c1 = a1.shape[3]
    pooled = np.zeros((q1 + 2 * pad, q1 + 2 * pad, c1))
    cols = np.empty((n, s2, s2, 9 * c1))
    for m in range(n):
        for r in range(q1):
            for c in range(q1):
                for o in range(c1):
                    pooled[r + pad, c + pad, o] = 0.25 * (
                        a1[m, 2 * r, 2 * c, o]
                        + a1[m, 2 * r + 1, 2 * c, o]
                        + a1[m, 2 * r, 2 * c + 1, o]
                        + a1[m, 2 * r + 1, 2 * c + 1, o]
                    )
        for r in range(s2):
            for c in range(s2):
                for di in range(3):
                    for dj in range(3):
                        base = (3 * di + dj) * c1
                        for o in range(c1):
                            cols[m, r, c, base + o] = pooled[r + di, c + dj, o]
    return cols


@nb.njit(cache=True)
def col2im_unpool(gcols, a1, q1, pad):
    """Adjoint of ``pool_im2col`` composed with the tanh derivative of ``a1``."""
    n, s2 = gcols.shape[0], gcols.shape[1]
    s1 = a1.shape[1]
    c1 = a1.shape[3]
    gpool = np.zeros((q1 + 2 * pad, q1 + 2 * pad, c1))
    out = np.zeros((n, s1, s1, c1))
    for m in range(n):
        gpool[:] = 0.0
        for r in range(s2):
            for c in range(s2):
                for di in range(3):
                    for dj in range(3):
                        base = (3 * di + dj) * c1
                        for o in range(c1):
                            gpool[r + di, c + dj, o] += gcols[m, r, c, base + o]
        for r in range(q1):
            for c in range(q1):
                for o in range(c1):
                    g = 0.25 * gpool[r + pad, c + pad, o]
                    for di in range(2):
                        for dj in range(2):
                            a = a1[m, 2 * r + di, 2 * c + dj, o]
                            out[m, 2 * r + di, 2 * c + dj, o] = g * (1.0 - a * a)
    return out
