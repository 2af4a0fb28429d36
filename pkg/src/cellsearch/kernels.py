"""Low-level float64 array kernels for the autodiff engine.

Hot loops (depthwise convolutions, 3x3 pooling, batch-norm passes, fused
axpy accumulation) are numba-jitted with fastmath disabled so results are
bitwise reproducible; every kernel has a pure-numpy fallback. Pointwise
(1x1) convolutions and dense im2col convolutions go through BLAS matmul.

Layout conventions: tensors are C-contiguous float64 (B, C, H, W); depthwise
weights are (C, KH, KW); dense weights (Cout, Cin/groups, KH, KW). Padding is
implicit (never materialized). Stride-1 paths use branch-free contiguous
inner loops so LLVM can vectorize them; reductions accumulate into row
buffers first (elementwise, vectorizable) and collapse sequentially, keeping
the floating-point order fixed. All accumulation orders are deterministic so
repeated runs give identical bits.
"""

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*a, **k):
        def deco(f):
            return f

        return deco


# ---------------------------------------------------------------------------
# depthwise convolution
#
# The wrappers dispatch to shape-specialized jitted kernels (kernel size,
# dilation, stride and relu fusion baked in as compile-time constants so the
# tap loops fully unroll and the inner column loop vectorizes). Stride-1
# input gradients reuse the forward kernel with a 180-degree-flipped weight;
# that identity holds because every stride-1 conv here uses symmetric
# padding pad = dilation*(k-1)/2.

_SPEC = {}


def _dw_fwd_factory(KK, DIL, STRIDE, RELU):
    EXT = DIL * (KK - 1)
    PAD = EXT // 2

    @njit(fastmath=False)
    def kern(x, w, out):
        B, C, H, W = x.shape
        OH, OW = out.shape[2], out.shape[3]
        wlo = (PAD + STRIDE - 1) // STRIDE
        whi = (W - 1 - EXT + PAD) // STRIDE
        if whi > OW - 1:
            whi = OW - 1
        for b in range(B):
            for c in range(C):
                wc = w[c]
                for oh in range(OH):
                    ih0 = oh * STRIDE - PAD
                    orow = out[b, c, oh]
                    if ih0 >= 0 and ih0 + EXT < H and wlo <= whi:
                        for ow in range(wlo, whi + 1):
                            iw0 = ow * STRIDE - PAD
                            acc = 0.0
                            for i in range(KK):
                                xrow = x[b, c, ih0 + i * DIL]
                                for j in range(KK):
                                    v = xrow[iw0 + j * DIL]
                                    if RELU:
                                        v = max(v, 0.0)
                                    acc += wc[i, j] * v
                            orow[ow] = acc
                        lo1, hi1, lo2, hi2 = 0, wlo, whi + 1, OW
                    else:
                        lo1, hi1, lo2, hi2 = 0, OW, 0, 0
                    for half in range(2):
                        s0 = lo1 if half == 0 else lo2
                        s1 = hi1 if half == 0 else hi2
                        for ow in range(s0, s1):
                            iw0 = ow * STRIDE - PAD
                            acc = 0.0
                            for i in range(KK):
                                ih = ih0 + i * DIL
                                if ih < 0 or ih >= H:
                                    continue
                                for j in range(KK):
                                    iw = iw0 + j * DIL
                                    if iw < 0 or iw >= W:
                                        continue
                                    v = x[b, c, ih, iw]
                                    if RELU:
                                        v = max(v, 0.0)
                                    acc += wc[i, j] * v
                            orow[ow] = acc
    return kern


def _dw_bwdx_scatter_factory(KK, DIL, RELU):
    # stride-2 input gradient; sequential scatter per (b, c) slice
    EXT = DIL * (KK - 1)
    PAD = EXT // 2

    @njit(fastmath=False)
    def kern(g, w, x, gx):
        B, C, H, W = gx.shape
        OH, OW = g.shape[2], g.shape[3]
        for b in range(B):
            for c in range(C):
                wc = w[c]
                for oh in range(OH):
                    ih0 = oh * 2 - PAD
                    grow = g[b, c, oh]
                    for i in range(KK):
                        ih = ih0 + i * DIL
                        if ih < 0 or ih >= H:
                            continue
                        gxrow = gx[b, c, ih]
                        for j in range(KK):
                            wv = wc[i, j]
                            off = j * DIL - PAD
                            lo = ((-off + 1) // 2) if off < 0 else 0
                            hi = (W - 1 - off) // 2
                            if hi > OW - 1:
                                hi = OW - 1
                            for ow in range(lo, hi + 1):
                                gxrow[2 * ow + off] += grow[ow] * wv
                if RELU:
                    for h in range(H):
                        xrow = x[b, c, h]
                        gxrow = gx[b, c, h]
                        for q in range(W):
                            gxrow[q] *= 1.0 if xrow[q] > 0.0 else 0.0
    return kern


def _dw_bwdw_factory(KK, DIL, STRIDE, RELU):
    # single sweep over (b, oh) with one row accumulator per tap; the
    # per-tap (b, oh, ow) summation order matches the naive loop exactly
    EXT = DIL * (KK - 1)
    PAD = EXT // 2

    @njit(fastmath=False)
    def kern(g, x, gw):
        B, C, H, W = x.shape
        OH, OW = g.shape[2], g.shape[3]
        bufs = np.empty((KK * KK, OW))
        for c in range(C):
            for t in range(KK * KK):
                for ow in range(OW):
                    bufs[t, ow] = 0.0
            for b in range(B):
                for oh in range(OH):
                    ih0 = oh * STRIDE - PAD
                    grow = g[b, c, oh]
                    for i in range(KK):
                        ih = ih0 + i * DIL
                        if ih < 0 or ih >= H:
                            continue
                        xrow = x[b, c, ih]
                        for j in range(KK):
                            off = j * DIL - PAD
                            lo = ((-off + STRIDE - 1) // STRIDE) if off < 0 else 0
                            hi = (W - 1 - off) // STRIDE
                            if hi > OW - 1:
                                hi = OW - 1
                            brow = bufs[i * KK + j]
                            for ow in range(lo, hi + 1):
                                v = xrow[STRIDE * ow + off]
                                if RELU:
                                    v = max(v, 0.0)
                                brow[ow] += grow[ow] * v
            for i in range(KK):
                for j in range(KK):
                    acc = 0.0
                    brow = bufs[i * KK + j]
                    for ow in range(OW):
                        acc += brow[ow]
                    gw[c, i, j] = acc
    return kern


@njit(cache=True, fastmath=False)
def _relu_mask(gx, x):
    n = gx.size
    gf = gx.reshape(n)
    xf = x.reshape(n)
    for q in range(n):
        gf[q] *= 1.0 if xf[q] > 0.0 else 0.0


def _spec(kind, k, dil, stride, relu):
    key = (kind, k, dil, stride, relu)
    fn = _SPEC.get(key)
    if fn is None:
        if kind == "fwd":
            fn = _dw_fwd_factory(k, dil, stride, relu)
        elif kind == "bwdx2":
            fn = _dw_bwdx_scatter_factory(k, dil, relu)
        else:
            fn = _dw_bwdw_factory(k, dil, stride, relu)
        _SPEC[key] = fn
    return fn


def warm_kernels(ks=(3, 5), strides=(1, 2)):
    """Pre-compile the specialized conv kernels this package dispatches to."""
    if not HAS_NUMBA:
        return
    x = np.zeros((1, 1, 8, 8))
    g1 = np.zeros((1, 1, 8, 8))
    g2 = np.zeros((1, 1, 4, 4))
    for k in ks:
        for dil in (1, 2) if k in (3, 5) else (1,):
            w = np.zeros((1, k, k))
            for s in strides:
                if dil == 2 and k == 5 and s not in strides:
                    continue
                y = dw_conv_fwd(x, w, s, dil, relu_in=True)
                dw_conv_bwd(g1 if s == 1 else g2, x, w, s, dil, relu_in=True)
                del y


@njit(cache=True, fastmath=False)
def _dw_fwd(x, w, out, stride, pad, dil, relu_in):
    B, C, H, W = x.shape
    KH, KW = w.shape[1], w.shape[2]
    OH, OW = out.shape[2], out.shape[3]
    for b in range(B):
        for c in range(C):
            for oh in range(OH):
                ih0 = oh * stride - pad
                orow = out[b, c, oh]
                for i in range(KH):
                    ih = ih0 + i * dil
                    if ih < 0 or ih >= H:
                        continue
                    xrow = x[b, c, ih]
                    for j in range(KW):
                        wv = w[c, i, j]
                        off = j * dil - pad
                        lo = ((-off + stride - 1) // stride) if off < 0 else 0
                        hi = (W - 1 - off) // stride
                        if hi > OW - 1:
                            hi = OW - 1
                        if stride == 1:
                            if relu_in:
                                for ow in range(lo, hi + 1):
                                    orow[ow] += max(xrow[ow + off], 0.0) * wv
                            else:
                                for ow in range(lo, hi + 1):
                                    orow[ow] += xrow[ow + off] * wv
                        else:
                            if relu_in:
                                for ow in range(lo, hi + 1):
                                    orow[ow] += max(xrow[2 * ow + off], 0.0) * wv
                            else:
                                for ow in range(lo, hi + 1):
                                    orow[ow] += xrow[2 * ow + off] * wv


@njit(cache=True, fastmath=False)
def _dw_bwd_x(g, w, x, gx, stride, pad, dil, relu_in):
    B, C, H, W = gx.shape
    KH, KW = w.shape[1], w.shape[2]
    OH, OW = g.shape[2], g.shape[3]
    for b in range(B):
        for c in range(C):
            for oh in range(OH):
                ih0 = oh * stride - pad
                grow = g[b, c, oh]
                for i in range(KH):
                    ih = ih0 + i * dil
                    if ih < 0 or ih >= H:
                        continue
                    gxrow = gx[b, c, ih]
                    for j in range(KW):
                        wv = w[c, i, j]
                        off = j * dil - pad
                        lo = ((-off + stride - 1) // stride) if off < 0 else 0
                        hi = (W - 1 - off) // stride
                        if hi > OW - 1:
                            hi = OW - 1
                        if stride == 1:
                            for ow in range(lo, hi + 1):
                                gxrow[ow + off] += grow[ow] * wv
                        else:
                            for ow in range(lo, hi + 1):
                                gxrow[2 * ow + off] += grow[ow] * wv
            if relu_in:
                for h in range(H):
                    xrow = x[b, c, h]
                    gxrow = gx[b, c, h]
                    for wq in range(W):
                        gxrow[wq] *= 1.0 if xrow[wq] > 0.0 else 0.0


@njit(cache=True, fastmath=False)
def _dw_bwd_w(g, x, gw, stride, pad, dil, relu_in):
    B, C, H, W = x.shape
    KH, KW = gw.shape[1], gw.shape[2]
    OH, OW = g.shape[2], g.shape[3]
    buf = np.empty(OW)
    for c in range(C):
        for i in range(KH):
            for j in range(KW):
                off = j * dil - pad
                lo = ((-off + stride - 1) // stride) if off < 0 else 0
                hi = (W - 1 - off) // stride
                if hi > OW - 1:
                    hi = OW - 1
                for ow in range(OW):
                    buf[ow] = 0.0
                for b in range(B):
                    for oh in range(OH):
                        ih = oh * stride - pad + i * dil
                        if ih < 0 or ih >= H:
                            continue
                        grow = g[b, c, oh]
                        xrow = x[b, c, ih]
                        if stride == 1:
                            if relu_in:
                                for ow in range(lo, hi + 1):
                                    buf[ow] += grow[ow] * max(xrow[ow + off], 0.0)
                            else:
                                for ow in range(lo, hi + 1):
                                    buf[ow] += grow[ow] * xrow[ow + off]
                        else:
                            if relu_in:
                                for ow in range(lo, hi + 1):
                                    buf[ow] += grow[ow] * max(xrow[2 * ow + off], 0.0)
                            else:
                                for ow in range(lo, hi + 1):
                                    buf[ow] += grow[ow] * xrow[2 * ow + off]
                acc = 0.0
                for ow in range(OW):
                    acc += buf[ow]
                gw[c, i, j] = acc


def dw_conv_fwd(x, w, stride=1, dil=1, pad=None, relu_in=False):
    """Depthwise conv; pad defaults to 'same-at-stride-1' for the kernel/dilation."""
    B, C, H, W = x.shape
    KH, KW = w.shape[1], w.shape[2]
    sym_pad = dil * (KH - 1) // 2
    if pad is None:
        pad = sym_pad
    OH = (H + 2 * pad - dil * (KH - 1) - 1) // stride + 1
    OW = (W + 2 * pad - dil * (KW - 1) - 1) // stride + 1
    if HAS_NUMBA and KH == KW and pad == sym_pad and stride in (1, 2):
        out = np.empty((B, C, OH, OW))
        _spec("fwd", KH, dil, stride, relu_in)(x, w, out)
        return out
    out = np.zeros((B, C, OH, OW))
    if HAS_NUMBA:
        _dw_fwd(x, w, out, stride, pad, dil, relu_in)
    else:
        xr = np.maximum(x, 0.0) if relu_in else x
        for i in range(KH):
            for j in range(KW):
                _shift_madd(out, xr, w[:, i, j], i * dil - pad, j * dil - pad, stride)
    return out


def dw_conv_bwd(g, x, w, stride=1, dil=1, pad=None, relu_in=False):
    KH, KW = w.shape[1], w.shape[2]
    sym_pad = dil * (KH - 1) // 2
    if pad is None:
        pad = sym_pad
    gw = np.zeros_like(w)
    if HAS_NUMBA and KH == KW and pad == sym_pad and stride in (1, 2):
        if stride == 1:
            # transposed conv == forward conv with the flipped kernel
            wflip = np.ascontiguousarray(w[:, ::-1, ::-1])
            gx = np.empty_like(x)
            _spec("fwd", KH, dil, 1, False)(g, wflip, gx)
            if relu_in:
                _relu_mask(gx, x)
        else:
            gx = np.zeros_like(x)
            _spec("bwdx2", KH, dil, 2, relu_in)(g, w, x, gx)
        _spec("bwdw", KH, dil, stride, relu_in)(g, x, gw)
        return gx, gw
    gx = np.zeros_like(x)
    if HAS_NUMBA:
        _dw_bwd_x(g, w, x, gx, stride, pad, dil, relu_in)
        _dw_bwd_w(g, x, gw, stride, pad, dil, relu_in)
    else:
        xr = np.maximum(x, 0.0) if relu_in else x
        for i in range(KH):
            for j in range(KW):
                _shift_madd_T(gx, g, w[:, i, j], i * dil - pad, j * dil - pad, stride)
                gw[:, i, j] = _shift_dot(g, xr, i * dil - pad, j * dil - pad, stride)
        if relu_in:
            gx[x <= 0.0] = 0.0
    return gx, gw


def _valid_span(off, stride, W, OW):
    lo = ((-off + stride - 1) // stride) if off < 0 else 0
    hi = min(OW - 1, (W - 1 - off) // stride)
    return lo, hi


def _shift_madd(out, x, wc, ioff, joff, stride):
    # out[..., oh, ow] += wc[c] * x[..., oh*s+ioff, ow*s+joff] over valid range
    B, C, OH, OW = out.shape
    H, W = x.shape[2], x.shape[3]
    hlo, hhi = _valid_span(ioff, stride, H, OH)
    wlo, whi = _valid_span(joff, stride, W, OW)
    if hlo > hhi or wlo > whi:
        return
    xs = x[:, :, hlo * stride + ioff:hhi * stride + ioff + 1:stride,
           wlo * stride + joff:whi * stride + joff + 1:stride]
    out[:, :, hlo:hhi + 1, wlo:whi + 1] += wc[None, :, None, None] * xs


def _shift_madd_T(gx, g, wc, ioff, joff, stride):
    B, C, OH, OW = g.shape
    H, W = gx.shape[2], gx.shape[3]
    hlo, hhi = _valid_span(ioff, stride, H, OH)
    wlo, whi = _valid_span(joff, stride, W, OW)
    if hlo > hhi or wlo > whi:
        return
    gx[:, :, hlo * stride + ioff:hhi * stride + ioff + 1:stride,
       wlo * stride + joff:whi * stride + joff + 1:stride] += \
        wc[None, :, None, None] * g[:, :, hlo:hhi + 1, wlo:whi + 1]


def _shift_dot(g, x, ioff, joff, stride):
    B, C, OH, OW = g.shape
    H, W = x.shape[2], x.shape[3]
    hlo, hhi = _valid_span(ioff, stride, H, OH)
    wlo, whi = _valid_span(joff, stride, W, OW)
    if hlo > hhi or wlo > whi:
        return np.zeros(C)
    xs = x[:, :, hlo * stride + ioff:hhi * stride + ioff + 1:stride,
           wlo * stride + joff:whi * stride + joff + 1:stride]
    return np.einsum('bchw,bchw->c', g[:, :, hlo:hhi + 1, wlo:whi + 1], xs)


# ---------------------------------------------------------------------------
# 3x3 pooling, padding 1


@njit(cache=True, fastmath=False)
def _maxpool_fwd(x, out, idx, stride):
    B, C, H, W = x.shape
    OH, OW = out.shape[2], out.shape[3]
    # interior output columns have all three window columns in bounds
    wlo = (1 + stride - 1) // stride
    whi = min(OW - 1, (W - 2 + 1 - 1) // stride)  # ow*s+1 <= W-1
    for b in range(B):
        for c in range(C):
            for oh in range(OH):
                ih0 = oh * stride - 1
                full_rows = ih0 >= 0 and ih0 + 2 < H
                orow = out[b, c, oh]
                irow = idx[b, c, oh]
                if full_rows and wlo <= whi:
                    x0 = x[b, c, ih0]
                    x1 = x[b, c, ih0 + 1]
                    x2 = x[b, c, ih0 + 2]
                    for ow in range(wlo, whi + 1):
                        iw = ow * stride - 1
                        m0 = max(x0[iw], max(x0[iw + 1], x0[iw + 2]))
                        m1 = max(x1[iw], max(x1[iw + 1], x1[iw + 2]))
                        m2 = max(x2[iw], max(x2[iw + 1], x2[iw + 2]))
                        orow[ow] = max(m0, max(m1, m2))
                    for ow in range(wlo, whi + 1):
                        iw = ow * stride - 1
                        best = orow[ow]
                        if x0[iw] == best:
                            irow[ow] = ih0 * W + iw
                        elif x0[iw + 1] == best:
                            irow[ow] = ih0 * W + iw + 1
                        elif x0[iw + 2] == best:
                            irow[ow] = ih0 * W + iw + 2
                        elif x1[iw] == best:
                            irow[ow] = (ih0 + 1) * W + iw
                        elif x1[iw + 1] == best:
                            irow[ow] = (ih0 + 1) * W + iw + 1
                        elif x1[iw + 2] == best:
                            irow[ow] = (ih0 + 1) * W + iw + 2
                        elif x2[iw] == best:
                            irow[ow] = (ih0 + 2) * W + iw
                        elif x2[iw + 1] == best:
                            irow[ow] = (ih0 + 2) * W + iw + 1
                        else:
                            irow[ow] = (ih0 + 2) * W + iw + 2
                    b1lo, b1hi, b2lo, b2hi = 0, wlo, whi + 1, OW
                else:
                    b1lo, b1hi, b2lo, b2hi = 0, OW, 0, 0
                for border in range(2):
                    blo = b1lo if border == 0 else b2lo
                    bhi = b1hi if border == 0 else b2hi
                    for ow in range(blo, bhi):
                        best = -np.inf
                        bi = -1
                        for i in range(3):
                            ih = ih0 + i
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(3):
                                iw = ow * stride - 1 + j
                                if iw < 0 or iw >= W:
                                    continue
                                v = x[b, c, ih, iw]
                                if v > best:
                                    best = v
                                    bi = ih * W + iw
                        orow[ow] = best
                        irow[ow] = bi


@njit(cache=True, fastmath=False)
def _maxpool_bwd(g, idx, gx):
    B, C, OH, OW = g.shape
    W = gx.shape[3]
    gxf = gx.reshape(gx.shape[0], gx.shape[1], gx.shape[2] * W)
    for b in range(B):
        for c in range(C):
            gslab = gxf[b, c]
            for oh in range(OH):
                grow = g[b, c, oh]
                irow = idx[b, c, oh]
                for ow in range(OW):
                    gslab[irow[ow]] += grow[ow]


@njit(cache=True, fastmath=False)
def _avgpool_fwd(x, out, stride):
    B, C, H, W = x.shape
    OH, OW = out.shape[2], out.shape[3]
    wlo = (1 + stride - 1) // stride
    whi = min(OW - 1, (W - 2) // stride)
    for b in range(B):
        for c in range(C):
            for oh in range(OH):
                ih0 = oh * stride - 1
                full_rows = ih0 >= 0 and ih0 + 2 < H
                orow = out[b, c, oh]
                if full_rows and wlo <= whi:
                    x0 = x[b, c, ih0]
                    x1 = x[b, c, ih0 + 1]
                    x2 = x[b, c, ih0 + 2]
                    for ow in range(wlo, whi + 1):
                        iw = ow * stride - 1
                        s = (x0[iw] + x0[iw + 1] + x0[iw + 2]
                             + x1[iw] + x1[iw + 1] + x1[iw + 2]
                             + x2[iw] + x2[iw + 1] + x2[iw + 2])
                        orow[ow] = s / 9.0
                    b1lo, b1hi, b2lo, b2hi = 0, wlo, whi + 1, OW
                else:
                    b1lo, b1hi, b2lo, b2hi = 0, OW, 0, 0
                for border in range(2):
                    blo = b1lo if border == 0 else b2lo
                    bhi = b1hi if border == 0 else b2hi
                    for ow in range(blo, bhi):
                        acc = 0.0
                        n = 0
                        for i in range(3):
                            ih = ih0 + i
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(3):
                                iw = ow * stride - 1 + j
                                if 0 <= iw < W:
                                    acc += x[b, c, ih, iw]
                                    n += 1
                        orow[ow] = acc / n


@njit(cache=True, fastmath=False)
def _avgpool_bwd(g, gx, stride):
    B, C, OH, OW = g.shape
    H, W = gx.shape[2], gx.shape[3]
    gs = np.empty(OW)
    for b in range(B):
        for c in range(C):
            for oh in range(OH):
                ih0 = oh * stride - 1
                rows = 0
                for i in range(3):
                    if 0 <= ih0 + i < H:
                        rows += 1
                grow = g[b, c, oh]
                for ow in range(OW):
                    iw0 = ow * stride - 1
                    colj = 0
                    for j in range(3):
                        if 0 <= iw0 + j < W:
                            colj += 1
                    gs[ow] = grow[ow] / (rows * colj)
                for i in range(3):
                    ih = ih0 + i
                    if ih < 0 or ih >= H:
                        continue
                    gxrow = gx[b, c, ih]
                    for j in range(3):
                        off = j - 1
                        lo = ((-off + stride - 1) // stride) if off < 0 else 0
                        hi = (W - 1 - off) // stride
                        if hi > OW - 1:
                            hi = OW - 1
                        if stride == 1:
                            for ow in range(lo, hi + 1):
                                gxrow[ow + off] += gs[ow]
                        else:
                            for ow in range(lo, hi + 1):
                                gxrow[2 * ow + off] += gs[ow]


def pool3_out_hw(H, W, stride):
    return (H + 2 - 3) // stride + 1, (W + 2 - 3) // stride + 1


def maxpool3_fwd(x, stride):
    B, C, H, W = x.shape
    OH, OW = pool3_out_hw(H, W, stride)
    out = np.empty((B, C, OH, OW))
    idx = np.empty((B, C, OH, OW), dtype=np.int64)
    if HAS_NUMBA:
        _maxpool_fwd(x, out, idx, stride)
    else:
        _maxpool_fwd_np(x, out, idx, stride)
    return out, idx


def maxpool3_bwd(g, idx, in_shape):
    gx = np.zeros(in_shape)
    if HAS_NUMBA:
        _maxpool_bwd(g, idx, gx)
    else:
        B, C, OH, OW = g.shape
        gxf = gx.reshape(B, C, -1)
        for b in range(B):
            for c in range(C):
                np.add.at(gxf[b, c], idx[b, c].ravel(), g[b, c].ravel())
    return gx


def avgpool3_fwd(x, stride):
    B, C, H, W = x.shape
    OH, OW = pool3_out_hw(H, W, stride)
    out = np.empty((B, C, OH, OW))
    if HAS_NUMBA:
        _avgpool_fwd(x, out, stride)
    else:
        _avgpool_fwd_np(x, out, stride)
    return out


def avgpool3_bwd(g, in_shape, stride):
    gx = np.zeros(in_shape)
    if HAS_NUMBA:
        _avgpool_bwd(g, gx, stride)
    else:
        _avgpool_bwd_np(g, gx, stride)
    return gx


def _window_iter(H, W, OH, OW, stride):
    for oh in range(OH):
        for ow in range(OW):
            hs = [h for h in range(oh * stride - 1, oh * stride + 2) if 0 <= h < H]
            ws = [w for w in range(ow * stride - 1, ow * stride + 2) if 0 <= w < W]
            yield oh, ow, hs, ws


def _maxpool_fwd_np(x, out, idx, stride):
    B, C, H, W = x.shape
    for oh, ow, hs, ws in _window_iter(H, W, out.shape[2], out.shape[3], stride):
        win = x[:, :, hs][:, :, :, ws].reshape(B, C, -1)
        flat = np.argmax(win, axis=2)
        out[:, :, oh, ow] = np.take_along_axis(win, flat[:, :, None], 2)[:, :, 0]
        hsa, wsa = np.asarray(hs), np.asarray(ws)
        idx[:, :, oh, ow] = hsa[flat // len(ws)] * W + wsa[flat % len(ws)]


def _avgpool_fwd_np(x, out, stride):
    H, W = x.shape[2], x.shape[3]
    for oh, ow, hs, ws in _window_iter(H, W, out.shape[2], out.shape[3], stride):
        out[:, :, oh, ow] = x[:, :, hs][:, :, :, ws].mean(axis=(2, 3))


def _avgpool_bwd_np(g, gx, stride):
    H, W = gx.shape[2], gx.shape[3]
    for oh, ow, hs, ws in _window_iter(H, W, g.shape[2], g.shape[3], stride):
        share = g[:, :, oh, ow] / (len(hs) * len(ws))
        for h in hs:
            for w in ws:
                gx[:, :, h, w] += share


# ---------------------------------------------------------------------------
# elementwise accumulation and batch-norm passes


@njit(cache=True, fastmath=False)
def _axpy(out, y, a):
    n = out.size
    of = out.reshape(n)
    yf = y.reshape(n)
    for i in range(n):
        of[i] += a * yf[i]


def axpy(out, y, a):
    """out += a * y, single fused pass."""
    if HAS_NUMBA:
        _axpy(out, y, a)
    else:
        out += a * y


@njit(cache=True, fastmath=False)
def _bn_norm(x, mean, invstd, gamma, beta, out):
    B, C, H, W = x.shape
    affine = gamma.size > 0
    for b in range(B):
        for c in range(C):
            m = mean[c]
            s = invstd[c]
            if affine:
                sc = s * gamma[c]
                bt = beta[c] - m * sc
            else:
                sc = s
                bt = -m * s
            xs = x[b, c].reshape(H * W)
            os = out[b, c].reshape(H * W)
            for q in range(H * W):
                os[q] = xs[q] * sc + bt


@njit(cache=True, fastmath=False)
def _bn_bwd_reduce(g, x, mean, invstd, sg, sgx, buf_a, buf_b):
    B, C, H, W = x.shape
    HW = H * W
    for c in range(C):
        m = mean[c]
        s = invstd[c]
        for q in range(HW):
            buf_a[q] = 0.0
            buf_b[q] = 0.0
        for b in range(B):
            gs = g[b, c].reshape(HW)
            xs = x[b, c].reshape(HW)
            for q in range(HW):
                gv = gs[q]
                buf_a[q] += gv
                buf_b[q] += gv * (xs[q] - m) * s
        a = 0.0
        bb = 0.0
        for q in range(HW):
            a += buf_a[q]
            bb += buf_b[q]
        sg[c] = a
        sgx[c] = bb


@njit(cache=True, fastmath=False)
def _bn_bwd_input(g, x, mean, invstd, gamma, sg, sgx, inv_n, out):
    B, C, H, W = x.shape
    HW = H * W
    affine = gamma.size > 0
    for b in range(B):
        for c in range(C):
            m = mean[c]
            s = invstd[c]
            gm = gamma[c] if affine else 1.0
            mg = sg[c] * inv_n
            mgx = sgx[c] * inv_n
            gs = g[b, c].reshape(HW)
            xs = x[b, c].reshape(HW)
            os = out[b, c].reshape(HW)
            for q in range(HW):
                xh = (xs[q] - m) * s
                os[q] = gm * s * (gs[q] - mg - xh * mgx)


_EMPTY = np.empty(0)


def bn_norm(x, mean, invstd, gamma=None, beta=None):
    out = np.empty_like(x)
    if HAS_NUMBA:
        _bn_norm(x, mean, invstd,
                 _EMPTY if gamma is None else gamma,
                 _EMPTY if beta is None else beta, out)
    else:
        out[:] = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        if gamma is not None:
            out *= gamma[None, :, None, None]
            out += beta[None, :, None, None]
    return out


def bn_bwd_reduce(g, x, mean, invstd):
    C = x.shape[1]
    sg = np.empty(C)
    sgx = np.empty(C)
    if HAS_NUMBA:
        hw = x.shape[2] * x.shape[3]
        _bn_bwd_reduce(g, x, mean, invstd, sg, sgx, np.empty(hw), np.empty(hw))
    else:
        sg[:] = g.sum(axis=(0, 2, 3))
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        sgx[:] = (g * xhat).sum(axis=(0, 2, 3))
    return sg, sgx


def bn_bwd_input(g, x, mean, invstd, gamma, sg, sgx, n):
    out = np.empty_like(x)
    if HAS_NUMBA:
        _bn_bwd_input(g, x, mean, invstd,
                      _EMPTY if gamma is None else gamma, sg, sgx, 1.0 / n, out)
    else:
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        gm = 1.0 if gamma is None else gamma[None, :, None, None]
        out[:] = gm * invstd[None, :, None, None] * (
            g - sg[None, :, None, None] / n - xhat * sgx[None, :, None, None] / n)
    return out


# ---------------------------------------------------------------------------
# pointwise (1x1) convolution via BLAS


def _strided_view(x, stride):
    return x if stride == 1 else np.ascontiguousarray(x[:, :, ::stride, ::stride])


def pw_conv_fwd(x, w, stride=1):
    """1x1 conv: w is (Cout, Cin)."""
    xs = _strided_view(x, stride)
    B, Ci, OH, OW = xs.shape
    out = np.matmul(w, xs.reshape(B, Ci, OH * OW))
    return out.reshape(B, w.shape[0], OH, OW), xs


def pw_conv_bwd(g, xs, w, in_shape, stride=1):
    B, Co, OH, OW = g.shape
    gr = g.reshape(B, Co, OH * OW)
    xr = xs.reshape(B, xs.shape[1], OH * OW)
    gxs = np.matmul(w.T, gr).reshape(xs.shape)
    gw = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0)
    if stride == 1:
        gx = gxs
    else:
        gx = np.zeros(in_shape)
        gx[:, :, ::stride, ::stride] = gxs
    return gx, gw


def matvec_outer_sum(g, x):
    """sum_b g[b] @ x[b].T for (B, O, P) x (B, I, P) -> (O, I), via BLAS."""
    return np.matmul(g, x.transpose(0, 2, 1)).sum(axis=0)


# ---------------------------------------------------------------------------
# dense conv via im2col (stem and generic path)


def conv_out_hw(H, W, KH, KW, stride, pad, dil):
    OH = (H + 2 * pad - dil * (KH - 1) - 1) // stride + 1
    OW = (W + 2 * pad - dil * (KW - 1) - 1) // stride + 1
    return OH, OW


def im2col(x, KH, KW, stride, pad, dil):
    B, C, H, W = x.shape
    OH, OW = conv_out_hw(H, W, KH, KW, stride, pad, dil)
    xp = x if pad == 0 else np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(
        xp, (dil * (KH - 1) + 1, dil * (KW - 1) + 1), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dil, ::dil]
    # (B, C, OH, OW, KH, KW) -> (B, C*KH*KW, OH*OW)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(B, C * KH * KW, OH * OW), (OH, OW)


def col2im(gcols, in_shape, KH, KW, stride, pad, dil):
    B, C, H, W = in_shape
    OH, OW = conv_out_hw(H, W, KH, KW, stride, pad, dil)
    gc = gcols.reshape(B, C, KH, KW, OH, OW)
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(KH):
        hi = i * dil
        for j in range(KW):
            wj = j * dil
            gxp[:, :, hi:hi + OH * stride:stride, wj:wj + OW * stride:stride] += gc[:, :, i, j]
    return gxp if pad == 0 else gxp[:, :, pad:-pad, pad:-pad]


def dense_conv_fwd(x, w, stride, pad, dil, groups=1):
    B, Ci, H, W = x.shape
    Co, Cig, KH, KW = w.shape
    if groups == 1:
        cols, (OH, OW) = im2col(x, KH, KW, stride, pad, dil)
        out = np.matmul(w.reshape(Co, Ci * KH * KW), cols)
        return out.reshape(B, Co, OH, OW), cols
    outs, saved = [], []
    cg, og = Ci // groups, Co // groups
    for gidx in range(groups):
        o, c = dense_conv_fwd(x[:, gidx * cg:(gidx + 1) * cg],
                              w[gidx * og:(gidx + 1) * og], stride, pad, dil)
        outs.append(o)
        saved.append(c)
    return np.concatenate(outs, axis=1), saved


def dense_conv_bwd(g, cols, x_shape, w, stride, pad, dil, groups=1):
    B, Ci, H, W = x_shape
    Co, Cig, KH, KW = w.shape
    if groups == 1:
        gr = g.reshape(B, Co, -1)
        wr = w.reshape(Co, Ci * KH * KW)
        gcols = np.matmul(wr.T, gr)
        gx = col2im(gcols, x_shape, KH, KW, stride, pad, dil)
        gw = matvec_outer_sum(gr, cols).reshape(w.shape)
        return gx, gw
    cg, og = Ci // groups, Co // groups
    gxs, gws = [], []
    for gidx in range(groups):
        gx, gw = dense_conv_bwd(g[:, gidx * og:(gidx + 1) * og], cols[gidx],
                                (B, cg, H, W), w[gidx * og:(gidx + 1) * og],
                                stride, pad, dil)
        gxs.append(gx)
        gws.append(gw)
    return np.concatenate(gxs, axis=1), np.concatenate(gws, axis=0)
