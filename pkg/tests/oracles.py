"""Independent brute-force oracles used by the test suite.

Everything here is deliberately written as plain nested loops over numpy
scalars, sharing no code path with the package under test.
"""

import numpy as np


def naive_conv2d(x, w, stride=1, pad=0, dil=1, groups=1):
    B, Ci, H, W = x.shape
    Co, Cig, KH, KW = w.shape
    OH = (H + 2 * pad - dil * (KH - 1) - 1) // stride + 1
    OW = (W + 2 * pad - dil * (KW - 1) - 1) // stride + 1
    out = np.zeros((B, Co, OH, OW))
    og = Co // groups
    for b in range(B):
        for co in range(Co):
            gidx = co // og
            for oh in range(OH):
                for ow in range(OW):
                    acc = 0.0
                    for ci in range(Cig):
                        for i in range(KH):
                            for j in range(KW):
                                ih = oh * stride - pad + i * dil
                                iw = ow * stride - pad + j * dil
                                if 0 <= ih < H and 0 <= iw < W:
                                    acc += x[b, gidx * Cig + ci, ih, iw] * w[co, ci, i, j]
                    out[b, co, oh, ow] = acc
    return out


def naive_pool2d(x, kind, stride=1):
    B, C, H, W = x.shape
    OH = (H + 2 - 3) // stride + 1
    OW = (W + 2 - 3) // stride + 1
    out = np.zeros((B, C, OH, OW))
    for b in range(B):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    vals = []
                    for i in range(3):
                        for j in range(3):
                            ih = oh * stride - 1 + i
                            iw = ow * stride - 1 + j
                            if 0 <= ih < H and 0 <= iw < W:
                                vals.append(x[b, c, ih, iw])
                    out[b, c, oh, ow] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def naive_softmax(v):
    e = np.exp(np.asarray(v, dtype=float) - np.max(v))
    return e / e.sum()


def naive_entropy_from_alphas(slices):
    """Direct sum of -p ln p over every edge distribution of every slice."""
    total = 0.0
    for sl in slices:
        for edge in sl:
            p = naive_softmax(edge)
            for q in p:
                if q > 0.0:
                    total -= q * np.log(q)
    return total
