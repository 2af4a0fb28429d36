"""Minimal dense-tensor core with reverse-mode differentiation.

A Tensor wraps a C-contiguous float64 ndarray. Differentiable operations are
module-level functions; when a Tape is active (``with Tape() as t:``) each
operation appends a node holding its inputs, output and a backward closure.
``backward(tape, loss)`` replays the tape in reverse and returns fresh
gradients for every requires_grad tensor it saw. Without an active tape the
same functions run forward-only and retain nothing, which is what eval-mode
inference uses.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ArgumentError, DimensionError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        # order='C' keeps 0-d scalars 0-d (ascontiguousarray would promote them)
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def param(cls, data, name=None):
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"<Tensor{tag} shape={self.data.shape} requires_grad={self.requires_grad}>"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op, inputs, output, bwd):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def record(op, inputs, out_data, bwd):
    """Wrap op output; append a tape node when a tape is active and grads flow."""
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE and out.requires_grad:
        _ACTIVE[-1].nodes.append(TapeNode(op, tuple(inputs), out, bwd))
    return out


def backward(tape, loss, params=None):
    """Reverse pass; returns {tensor: gradient} for every requires_grad tensor.

    ``loss`` must be a scalar produced through ``tape``. Tensors passed in
    ``params`` that never reached the loss get zero gradients. Each tensor's
    ``.grad`` is (re)assigned, not accumulated.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for t in params or ():
        leaves[id(t)] = t
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.bwd(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            if prev is None:
                grads[id(t)] = gi
            else:
                prev += gi
        for t in node.inputs:
            if t.requires_grad:
                leaves.setdefault(id(t), t)
    out = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        out[t] = g
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    """2-D convolution, differentiable w.r.t. input and weight.

    Weight layout (out_ch, in_ch/groups, kh, kw). Depthwise (groups == in_ch)
    and pointwise (1x1) cases take fast kernel paths.
    """
    if stride < 1 or padding < 0 or dilation < 1:
        raise ArgumentError("stride/dilation must be >= 1 and padding >= 0")
    if stride > 2:
        raise ArgumentError("stride must be 1 or 2")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    B, Ci, H, W = x.data.shape
    Co, Cig, KH, KW = w.data.shape
    if Ci % groups or Co % groups or Cig != Ci // groups:
        raise DimensionError(
            f"conv2d channel mismatch: input {Ci}, weight {w.data.shape}, groups {groups}")
    OH, OW = K.conv_out_hw(H, W, KH, KW, stride, padding, dilation)
    if OH < 1 or OW < 1:
        raise DimensionError(f"conv2d output would be empty: {(OH, OW)}")

    if groups == Ci and Co == Ci and Cig == 1:
        wd = w.data.reshape(Ci, KH, KW)
        out = K.dw_conv_fwd(x.data, wd, stride, dilation, padding)

        def bwd(g):
            gx = gw = None
            if x.requires_grad or w.requires_grad:
                gx, gwd = K.dw_conv_bwd(g, x.data, wd, stride, dilation, padding)
                gw = gwd.reshape(w.data.shape)
            return gx, gw

        return record("conv2d.dw", (x, w), out, bwd)

    if KH == 1 and KW == 1 and groups == 1 and padding == 0:
        w2 = w.data.reshape(Co, Ci)
        out, xs = K.pw_conv_fwd(x.data, w2, stride)

        def bwd(g):
            gx, gw = K.pw_conv_bwd(g, xs, w2, x.data.shape, stride)
            return (gx if x.requires_grad else None,
                    gw.reshape(w.data.shape) if w.requires_grad else None)

        return record("conv2d.pw", (x, w), out, bwd)

    out, cols = K.dense_conv_fwd(x.data, w.data, stride, padding, dilation, groups)

    def bwd(g):
        gx, gw = K.dense_conv_bwd(g, cols, x.data.shape, w.data,
                                  stride, padding, dilation, groups)
        return (gx if x.requires_grad else None,
                gw if w.requires_grad else None)

    return record("conv2d", (x, w), out, bwd)


def pool2d(x, kind, stride=1):
    """3x3 pooling with padding 1. avg excludes padded zeros from the divisor;
    max routes gradient to the argmax, ties to the first index in row-major
    scan order."""
    if stride not in (1, 2):
        raise ArgumentError("pool2d stride must be 1 or 2")
    if x.data.ndim != 4:
        raise DimensionError("pool2d expects 4-D input")
    if kind == "max":
        out, idx = K.maxpool3_fwd(x.data, stride)
        shape = x.data.shape

        def bwd(g):
            return (K.maxpool3_bwd(g, idx, shape),)

        return record("maxpool3", (x,), out, bwd)
    if kind == "avg":
        out = K.avgpool3_fwd(x.data, stride)
        shape = x.data.shape

        def bwd(g):
            return (K.avgpool3_bwd(g, shape, stride),)

        return record("avgpool3", (x,), out, bwd)
    raise ArgumentError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm:
    """Per-channel normalization state (running stats + optional affine)."""

    def __init__(self, channels, affine=False, eps=1e-5, momentum=0.1, name=""):
        self.channels = channels
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.gamma = Tensor.param(np.ones(channels), f"{name}.gamma") if affine else None
        self.beta = Tensor.param(np.zeros(channels), f"{name}.beta") if affine else None

    @property
    def affine(self):
        return self.gamma is not None


def batchnorm(x, bn, mode="train"):
    """Normalize per channel; train mode uses batch stats and updates running
    stats, eval mode uses the running stats (init mean 0 / var 1)."""
    if x.data.ndim != 4 or x.data.shape[1] != bn.channels:
        raise DimensionError(f"batchnorm expects (B,{bn.channels},H,W), got {x.data.shape}")
    B, C, H, W = x.data.shape
    n = B * H * W
    if mode == "train":
        if n < 2:
            raise ArgumentError("train-mode batchnorm needs batch*H*W >= 2 per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + bn.eps)
        m = bn.momentum
        bn.running_mean *= 1.0 - m
        bn.running_mean += m * mean
        bn.running_var *= 1.0 - m
        bn.running_var += m * var * (n / (n - 1))
    elif mode == "eval":
        mean = bn.running_mean
        invstd = 1.0 / np.sqrt(bn.running_var + bn.eps)
    else:
        raise ArgumentError(f"unknown batchnorm mode {mode!r}")

    gamma = bn.gamma.data if bn.affine else None
    beta = bn.beta.data if bn.affine else None
    out = K.bn_norm(x.data, mean, invstd, gamma, beta)
    inputs = (x, bn.gamma, bn.beta) if bn.affine else (x,)
    train = mode == "train"

    def bwd(g):
        sg, sgx = K.bn_bwd_reduce(g, x.data, mean, invstd)
        if x.requires_grad:
            if train:
                gx = K.bn_bwd_input(g, x.data, mean, invstd, gamma, sg, sgx, n)
            else:
                scale = invstd if gamma is None else invstd * gamma
                gx = g * scale[None, :, None, None]
        else:
            gx = None
        if bn.affine:
            return gx, sgx, sg
        return (gx,)

    return record("batchnorm", inputs, out, bwd)


# ---------------------------------------------------------------------------
# elementwise / shape ops


def relu(x):
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (out > 0.0),)

    return record("relu", (x,), out, bwd)


def add(x, y):
    if x.data.shape != y.data.shape:
        raise DimensionError(f"add shape mismatch {x.data.shape} vs {y.data.shape}")
    out = x.data + y.data

    def bwd(g):
        return (g if x.requires_grad else None, g if y.requires_grad else None)

    return record("add", (x, y), out, bwd)


def add_n(xs):
    """Sum of same-shape tensors with a fixed left-to-right order."""
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    shape = xs[0].data.shape
    for t in xs[1:]:
        if t.data.shape != shape:
            raise DimensionError("add_n shape mismatch")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data

    def bwd(g):
        return tuple(g if t.requires_grad else None for t in xs)

    return record("add_n", tuple(xs), out, bwd)


def scale(x, c):
    c = float(c)
    out = x.data * c

    def bwd(g):
        return (g * c,)

    return record("scale", (x,), out, bwd)


def mul(x, y):
    if x.data.shape != y.data.shape:
        raise DimensionError("mul shape mismatch")
    out = x.data * y.data

    def bwd(g):
        return (g * y.data if x.requires_grad else None,
                g * x.data if y.requires_grad else None)

    return record("mul", (x, y), out, bwd)


def sum_all(x):
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return record("sum_all", (x,), out, bwd)


def concat_channels(xs):
    xs = list(xs)
    b_hw = {(t.data.shape[0],) + t.data.shape[2:] for t in xs}
    if len(b_hw) != 1:
        raise DimensionError(f"concat_channels batch/spatial mismatch: {sorted(b_hw)}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in xs])[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, xs))

    return record("concat_channels", tuple(xs), out, bwd)


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise DimensionError("global_avg_pool expects 4-D input")
    B, C, H, W = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape).copy(),)

    return record("global_avg_pool", (x,), out, bwd)


def linear(x, w, b=None):
    """y = x @ w.T (+ b); w is (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", inputs, out, bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over the batch; gradient (softmax - onehot)/batch."""
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects (batch, classes) logits")
    t = np.asarray(targets)
    B, C = logits.data.shape
    if t.shape != (B,) or t.min() < 0 or t.max() >= C:
        raise ArgumentError(f"targets must be {B} class indices in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = np.asarray(-logp[np.arange(B), t].mean())
    softmax = ez / sez

    def bwd(g):
        gl = softmax.copy()
        gl[np.arange(B), t] -= 1.0
        gl *= float(g) / B
        return (gl,)

    return record("softmax_cross_entropy", (logits,), loss, bwd)


def softmax_last(x):
    """Softmax along the last axis, numerically stabilized by max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax_last", (x,), p, bwd)


def weighted_combine(ys, probs, flat_indices):
    """out = sum_o probs.flat[flat_indices[o]] * ys[o], one tape node.

    Differentiable w.r.t. every y and w.r.t. probs (gradients scatter into the
    indexed coordinates). The combination accumulates in list order.
    """
    if len(ys) != len(flat_indices):
        raise ArgumentError("one flat index per combined tensor required")
    pflat = probs.data.reshape(-1)
    out = np.zeros_like(ys[0].data)
    for y, fi in zip(ys, flat_indices):
        K.axpy(out, y.data, pflat[fi])

    def bwd(g):
        gys = [pflat[fi] * g if y.requires_grad else None
               for y, fi in zip(ys, flat_indices)]
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            gpf = gp.reshape(-1)
            for y, fi in zip(ys, flat_indices):
                gpf[fi] = float(np.vdot(g, y.data))
            gys.append(gp)
        else:
            gys.append(None)
        return tuple(gys)

    return record("weighted_combine", tuple(ys) + (probs,), out, bwd)


def grad_fault(x, factor=1.01):
    """Identity forward whose backward is deliberately scaled; lets the
    gradient checker prove it catches an inconsistent op."""
    out = x.data.copy()

    def bwd(g):
        return (g * factor,)

    return record("grad_fault", (x,), out, bwd)
