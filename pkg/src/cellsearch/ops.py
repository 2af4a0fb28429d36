"""The eight-element candidate operation set.

Index/name bijection (used for alpha axes and genotype files):

    0 zero          1 skip_connect   2 maxpool_3x3   3 avgpool_3x3
    4 sep_conv_3x3  5 sep_conv_5x5   6 dil_conv_3x3  7 dil_conv_5x5

Block internals follow the dominant cell-search convention: conv blocks are
ReLU -> depthwise conv -> pointwise conv -> BN units (separable convs stack
two units, the first carrying the stride), pooling is followed by BN, a
strided skip is a factorized reduce (two parallel 1x1 stride-2 convs, the
second on the input shifted one pixel in both spatial dims, concatenated,
then BN). All convolutions are bias-free.

Memory discipline: a block's forward keeps only its input reference and the
batch-norm statistics; the backward pass recomputes every internal
activation (and the block output, which the mixed-edge combination needs for
alpha gradients). That trades ~1 extra forward per backward for an
order-of-magnitude smaller live set, which is what lets a full float64
supernet step fit in a few hundred MB.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ArgumentError, DimensionError
from .tensor import BatchNorm, Tensor, record

OP_NAMES = ("zero", "skip_connect", "maxpool_3x3", "avgpool_3x3",
            "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5")
OP_INDEX = {n: i for i, n in enumerate(OP_NAMES)}
ZERO = OP_INDEX["zero"]
NUM_OPS = len(OP_NAMES)


def strided_hw(h, w, stride):
    return (h - 1) // stride + 1, (w - 1) // stride + 1


def _bn_stats(bn, p, mode):
    """Batch statistics (train: fresh + running update; eval: running)."""
    if mode == "train":
        mean = p.mean(axis=(0, 2, 3))
        var = p.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + bn.eps)
        n = p.shape[0] * p.shape[2] * p.shape[3]
        m = bn.momentum
        bn.running_mean *= 1.0 - m
        bn.running_mean += m * mean
        bn.running_var *= 1.0 - m
        bn.running_var += m * var * (n / (n - 1))
        return (mean, invstd, True)
    mean = bn.running_mean.copy()
    invstd = 1.0 / np.sqrt(bn.running_var + bn.eps)
    return (mean, invstd, False)


def _bn_apply(bn, p, stats):
    mean, invstd, _ = stats
    gamma = bn.gamma.data if bn.affine else None
    beta = bn.beta.data if bn.affine else None
    return K.bn_norm(p, mean, invstd, gamma, beta)


def _bn_bwd(bn, gy, p, stats):
    """Returns (gp, affine grads [ggamma, gbeta] or [])."""
    mean, invstd, train = stats
    gamma = bn.gamma.data if bn.affine else None
    sg, sgx = K.bn_bwd_reduce(gy, p, mean, invstd)
    if train:
        n = p.shape[0] * p.shape[2] * p.shape[3]
        gp = K.bn_bwd_input(gy, p, mean, invstd, gamma, sg, sgx, n)
    else:
        sc = invstd if gamma is None else invstd * gamma
        gp = gy * sc[None, :, None, None]
    return gp, ([sgx, sg] if bn.affine else [])


class _ConvUnit:
    """relu -> depthwise k x k -> pointwise 1x1 -> BN."""

    def __init__(self, channels, k, stride, dil, affine, name):
        c = channels
        self.k, self.stride, self.dil = k, stride, dil
        self.pad = dil * (k - 1) // 2
        self.wd = Tensor.param(np.zeros((c, k, k)), f"{name}.dw")
        self.wp = Tensor.param(np.zeros((c, c)), f"{name}.pw")
        self._init_scale = (np.sqrt(2.0 / (k * k)), np.sqrt(2.0 / c))
        self.bn = BatchNorm(c, affine=affine, name=f"{name}.bn")

    def init(self, rng):
        he_dw, he_pw = self._init_scale
        self.wd.data[:] = rng.standard_normal(self.wd.data.shape) * he_dw
        self.wp.data[:] = rng.standard_normal(self.wp.data.shape) * he_pw

    def params(self):
        ps = [self.wd, self.wp]
        if self.bn.affine:
            ps += [self.bn.gamma, self.bn.beta]
        return ps

    def _convs(self, z):
        d = K.dw_conv_fwd(z, self.wd.data, self.stride, self.dil, self.pad,
                          relu_in=True)
        p, _ = K.pw_conv_fwd(d, self.wp.data, 1)
        return d, p

    def fwd(self, z, mode):
        d, p = self._convs(z)
        stats = _bn_stats(self.bn, p, mode)
        return _bn_apply(self.bn, p, stats), stats

    def recompute(self, z, stats, need_y):
        d, p = self._convs(z)
        y = _bn_apply(self.bn, p, stats) if need_y else None
        return d, p, y

    def bwd(self, gy, z, stats, d, p, need_gz=True):
        gp, gaff = _bn_bwd(self.bn, gy, p, stats)
        gd, gwp = K.pw_conv_bwd(gp, d, self.wp.data, d.shape, 1)
        gz, gwd = K.dw_conv_bwd(gd, z, self.wd.data, self.stride, self.dil,
                                self.pad, relu_in=True)
        return (gz if need_gz else None), [gwd, gwp] + gaff


class OpInstance:
    """One candidate operation bound to a channel count and stride."""

    def __init__(self, kind, channels, stride=1, affine=False, name="op"):
        if isinstance(kind, str):
            kind = OP_INDEX[kind]
        if stride not in (1, 2):
            raise ArgumentError("op stride must be 1 or 2")
        self.kind = kind
        self.kind_name = OP_NAMES[kind]
        self.channels = channels
        self.stride = stride
        self.affine = affine
        self.name = name
        self.units = []
        self.bn = None
        self.w1 = self.w2 = None
        c = channels
        if self.kind_name in ("sep_conv_3x3", "sep_conv_5x5"):
            k = 3 if self.kind_name == "sep_conv_3x3" else 5
            self.units = [_ConvUnit(c, k, stride, 1, affine, f"{name}.u1"),
                          _ConvUnit(c, k, 1, 1, affine, f"{name}.u2")]
        elif self.kind_name in ("dil_conv_3x3", "dil_conv_5x5"):
            k = 3 if self.kind_name == "dil_conv_3x3" else 5
            self.units = [_ConvUnit(c, k, stride, 2, affine, f"{name}.u1")]
        elif self.kind_name in ("maxpool_3x3", "avgpool_3x3"):
            self.bn = BatchNorm(c, affine=affine, name=f"{name}.bn")
        elif self.kind_name == "skip_connect" and stride == 2:
            c1 = c - c // 2
            self.w1 = Tensor.param(np.zeros((c1, c)), f"{name}.fr1")
            self.w2 = Tensor.param(np.zeros((c // 2, c)), f"{name}.fr2")
            self.bn = BatchNorm(c, affine=affine, name=f"{name}.bn")

    def init(self, rng):
        for u in self.units:
            u.init(rng)
        for w in (self.w1, self.w2):
            if w is not None:
                w.data[:] = rng.standard_normal(w.data.shape) * np.sqrt(2.0 / self.channels)
        return self

    def parameters(self):
        ps = []
        for u in self.units:
            ps += u.params()
        for w in (self.w1, self.w2):
            if w is not None:
                ps.append(w)
        if self.bn is not None and self.bn.affine:
            ps += [self.bn.gamma, self.bn.beta]
        return ps

    def batchnorms(self):
        bns = [u.bn for u in self.units]
        if self.bn is not None:
            bns.append(self.bn)
        return bns

    def __call__(self, x, mode="train"):
        return op_forward(self, x, mode)

    # -- ndarray-level forward/backward --------------------------------------

    def forward_state(self, x, mode):
        """(output ndarray, minimal saved state). Internal activations are
        not retained; backward_state recomputes them."""
        kind, s = self.kind_name, self.stride
        B, C, H, W = x.shape
        if kind == "zero":
            oh, ow = strided_hw(H, W, s)
            return np.zeros((B, C, oh, ow)), None
        if kind == "skip_connect" and s == 1:
            return x, None
        if kind == "skip_connect":
            p = _facred_convs(x, self.w1.data, self.w2.data)
            stats = _bn_stats(self.bn, p, mode)
            return _bn_apply(self.bn, p, stats), stats
        if kind == "maxpool_3x3":
            p, _ = K.maxpool3_fwd(x, s)
            stats = _bn_stats(self.bn, p, mode)
            return _bn_apply(self.bn, p, stats), stats
        if kind == "avgpool_3x3":
            p = K.avgpool3_fwd(x, s)
            stats = _bn_stats(self.bn, p, mode)
            return _bn_apply(self.bn, p, stats), stats
        # conv blocks
        cur = x
        stats = []
        for u in self.units:
            cur, st = u.fwd(cur, mode)
            stats.append(st)
        return cur, tuple(stats)

    def backward_state(self, gy, x, state, need_gx=True, need_y=False):
        """Recompute internals and backprop one block.

        Returns (y or None, gx or None, param gradients aligned with
        ``parameters()``).
        """
        kind, s = self.kind_name, self.stride
        if kind == "zero":
            y = np.zeros_like(gy) if need_y else None
            return y, (np.zeros_like(x) if need_gx else None), []
        if kind == "skip_connect" and s == 1:
            return (x if need_y else None), (gy if need_gx else None), []
        if kind == "skip_connect":
            return _facred_bwd(gy, x, self.w1, self.w2, self.bn, state,
                               need_gx, need_y)
        if kind == "maxpool_3x3":
            p, idx = K.maxpool3_fwd(x, s)
            y = _bn_apply(self.bn, p, state) if need_y else None
            gp, gaff = _bn_bwd(self.bn, gy, p, state)
            gx = K.maxpool3_bwd(gp, idx, x.shape) if need_gx else None
            return y, gx, gaff
        if kind == "avgpool_3x3":
            p = K.avgpool3_fwd(x, s)
            y = _bn_apply(self.bn, p, state) if need_y else None
            gp, gaff = _bn_bwd(self.bn, gy, p, state)
            gx = K.avgpool3_bwd(gp, x.shape, s) if need_gx else None
            return y, gx, gaff
        # conv blocks: recompute the unit chain once, then walk it backwards
        zs = [x]
        internals = []
        for i, u in enumerate(self.units):
            last = i == len(self.units) - 1
            d, p, ynext = u.recompute(zs[-1], state[i], need_y or not last)
            internals.append((d, p))
            zs.append(ynext if ynext is not None else None)
        y = zs[-1] if need_y else None
        g = gy
        pgrads = []
        for i in range(len(self.units) - 1, -1, -1):
            d, p = internals[i]
            need = need_gx or i > 0
            g, pg = self.units[i].bwd(g, zs[i], state[i], d, p, need_gz=need)
            pgrads = pg + pgrads
        return y, (g if need_gx else None), pgrads


def _facred_convs(x, w1, w2):
    B, C, H, W = x.shape
    x1 = np.ascontiguousarray(x[:, :, ::2, ::2])
    x2 = np.ascontiguousarray(_shifted(x)[:, :, ::2, ::2])
    oh, ow = strided_hw(H, W, 2)
    o1 = np.matmul(w1, x1.reshape(B, C, -1))
    o2 = np.matmul(w2, x2.reshape(B, C, -1))
    return np.concatenate([o1.reshape(B, -1, oh, ow), o2.reshape(B, -1, oh, ow)],
                          axis=1)


def _facred_bwd(gy, x, w1, w2, bn, stats, need_gx, need_y, relu_first=False):
    B, C, H, W = x.shape
    xr = np.maximum(x, 0.0) if relu_first else x
    x1 = np.ascontiguousarray(xr[:, :, ::2, ::2])
    x2 = np.ascontiguousarray(_shifted(xr)[:, :, ::2, ::2])
    oh, ow = strided_hw(H, W, 2)
    o1 = np.matmul(w1.data, x1.reshape(B, C, -1))
    o2 = np.matmul(w2.data, x2.reshape(B, C, -1))
    p = np.concatenate([o1.reshape(B, -1, oh, ow), o2.reshape(B, -1, oh, ow)], axis=1)
    y = _bn_apply(bn, p, stats) if need_y else None
    gp, gaff = _bn_bwd(bn, gy, p, stats)
    c1 = w1.data.shape[0]
    g1 = np.ascontiguousarray(gp[:, :c1]).reshape(B, c1, -1)
    g2 = np.ascontiguousarray(gp[:, c1:]).reshape(B, gp.shape[1] - c1, -1)
    gw1 = K.matvec_outer_sum(g1, x1.reshape(B, C, -1))
    gw2 = K.matvec_outer_sum(g2, x2.reshape(B, C, -1))
    gx = None
    if need_gx:
        gx1 = np.matmul(w1.data.T, g1).reshape(x1.shape)
        gx2 = np.matmul(w2.data.T, g2).reshape(x2.shape)
        gx = np.zeros_like(x)
        gx[:, :, ::2, ::2] = gx1
        gshift = np.zeros_like(x)
        gshift[:, :, ::2, ::2] = gx2
        gx[:, :, 1:, 1:] += gshift[:, :, :-1, :-1]
        if relu_first:
            gx[x <= 0.0] = 0.0
    return y, gx, [gw1, gw2] + gaff


def _shifted(x):
    out = np.zeros_like(x)
    out[:, :, :-1, :-1] = x[:, :, 1:, 1:]
    return out


def factorized_reduce(x, w1, w2, bn, mode, relu_first=False):
    """Standalone tape op for the factorized reduce (also the preprocess-0
    alignment block, which adds a leading ReLU)."""
    xr = np.maximum(x.data, 0.0) if relu_first else x.data
    p = _facred_convs(xr, w1.data, w2.data)
    stats = _bn_stats(bn, p, mode)
    y = _bn_apply(bn, p, stats)

    def bwd(g):
        _, gx, pgrads = _facred_bwd(g, x.data, w1, w2, bn, stats,
                                    x.requires_grad, False, relu_first=relu_first)
        return tuple([gx] + pgrads)

    inputs = [x, w1, w2]
    if bn.affine:
        inputs += [bn.gamma, bn.beta]
    return record("factorized_reduce", inputs, y, bwd)


def op_forward(op, x, mode="train"):
    """Apply one candidate operation block; one tape node per block."""
    if x.data.shape[1] != op.channels:
        raise DimensionError(
            f"{op.kind_name} expects {op.channels} channels, got {x.data.shape[1]}")
    if op.kind_name == "skip_connect" and op.stride == 1:
        return x
    y, state = op.forward_state(x.data, mode)
    if op.kind_name == "zero":
        return Tensor(y)

    def bwd(g):
        _, gx, pgrads = op.backward_state(g, x.data, state,
                                          need_gx=x.requires_grad, need_y=False)
        return tuple([gx] + pgrads)

    return record(op.kind_name, [x] + op.parameters(), y, bwd)


def op_param_count(kind, channels, affine, stride=1):
    """Exact trainable-scalar count of a block; BN contributes 2*channels iff affine."""
    if isinstance(kind, int):
        kind = OP_NAMES[kind]
    c = channels
    bn = 2 * c if affine else 0
    if kind == "zero":
        return 0
    if kind == "skip_connect":
        return 0 if stride == 1 else c * c + bn
    if kind in ("maxpool_3x3", "avgpool_3x3"):
        return bn
    if kind in ("sep_conv_3x3", "sep_conv_5x5"):
        k = 3 if kind == "sep_conv_3x3" else 5
        return 2 * (k * k * c + c * c) + 2 * bn
    if kind in ("dil_conv_3x3", "dil_conv_5x5"):
        k = 3 if kind == "dil_conv_3x3" else 5
        return k * k * c + c * c + bn
    raise ArgumentError(f"unknown op kind {kind!r}")
