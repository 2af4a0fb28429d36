"""Neural cell DAG: 2 input nodes, 4 intermediate nodes, 1 output node.

The 14 mixed-operation edges are enumerated in the canonical order

    EDGES = [(0,2),(1,2), (0,3),(1,3),(2,3), (0,4)..(3,4), (0,5)..(4,5)]

which is also the meaning of the 14-axis of every alpha slice. In a
reduction cell, edges whose source is an input node (u in {0, 1}) run their
operation at stride 2; all other edges at stride 1. Intermediate nodes sum
their incoming edges; the output node concatenates the four intermediates,
so a cell emits 4x its operating channel count.

A continuous edge is a single tape node: the forward pass weight-sums the
seven non-zero candidate outputs immediately (the zero op contributes
nothing by construction and is elided), retaining only the mixture; the
backward pass recomputes each candidate to form both the alpha gradients
(inner products against the incoming gradient) and the input/parameter
gradients.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ArgumentError, DimensionError
from .genotype import Genotype
from .ops import (NUM_OPS, OP_INDEX, OP_NAMES, ZERO, OpInstance,
                  _bn_apply, _bn_bwd, _bn_stats, factorized_reduce, op_forward)
from .tensor import BatchNorm, Tensor, add_n, concat_channels, record

EDGES = tuple((u, v) for v in range(2, 6) for u in range(v))
NUM_EDGES = len(EDGES)  # 14
NONZERO_OPS = tuple(k for k in range(NUM_OPS) if k != ZERO)


class Preprocess:
    """ReLU -> 1x1 conv -> BN input-alignment block (single recompute node)."""

    def __init__(self, c_in, c_out, affine=False, name="pre"):
        self.c_in, self.c_out = c_in, c_out
        self.w = Tensor.param(np.zeros((c_out, c_in)), f"{name}.conv")
        self.bn = BatchNorm(c_out, affine=affine, name=f"{name}.bn")

    def init(self, rng):
        self.w.data[:] = rng.standard_normal(self.w.data.shape) * np.sqrt(2.0 / self.c_in)
        return self

    def parameters(self):
        ps = [self.w]
        if self.bn.affine:
            ps += [self.bn.gamma, self.bn.beta]
        return ps

    def batchnorms(self):
        return [self.bn]

    def __call__(self, x, mode):
        if x.data.shape[1] != self.c_in:
            raise DimensionError(
                f"preprocess expects {self.c_in} channels, got {x.data.shape[1]}")
        xr = np.maximum(x.data, 0.0)
        p, _ = K.pw_conv_fwd(xr, self.w.data, 1)
        stats = _bn_stats(self.bn, p, mode)
        y = _bn_apply(self.bn, p, stats)
        del xr, p

        def bwd(g):
            xr = np.maximum(x.data, 0.0)
            p, _ = K.pw_conv_fwd(xr, self.w.data, 1)
            gp, gaff = _bn_bwd(self.bn, g, p, stats)
            gx, gw = K.pw_conv_bwd(gp, xr, self.w.data, x.data.shape, 1)
            if x.requires_grad:
                gx[x.data <= 0.0] = 0.0
            else:
                gx = None
            return tuple([gx, gw] + gaff)

        inputs = [x, self.w]
        if self.bn.affine:
            inputs += [self.bn.gamma, self.bn.beta]
        return record("preprocess", inputs, y, bwd)


class PreprocessReduce:
    """ReLU -> factorized reduce -> BN; aligns a full-resolution skip input
    after a reduction cell."""

    def __init__(self, c_in, c_out, affine=False, name="pre"):
        self.c_in, self.c_out = c_in, c_out
        c1 = c_out - c_out // 2
        self.w1 = Tensor.param(np.zeros((c1, c_in)), f"{name}.fr1")
        self.w2 = Tensor.param(np.zeros((c_out // 2, c_in)), f"{name}.fr2")
        self.bn = BatchNorm(c_out, affine=affine, name=f"{name}.bn")

    def init(self, rng):
        sd = np.sqrt(2.0 / self.c_in)
        self.w1.data[:] = rng.standard_normal(self.w1.data.shape) * sd
        self.w2.data[:] = rng.standard_normal(self.w2.data.shape) * sd
        return self

    def parameters(self):
        ps = [self.w1, self.w2]
        if self.bn.affine:
            ps += [self.bn.gamma, self.bn.beta]
        return ps

    def batchnorms(self):
        return [self.bn]

    def __call__(self, x, mode):
        return factorized_reduce(x, self.w1, self.w2, self.bn, mode, relu_first=True)


def edge_stride(kind, u):
    return 2 if (kind == "reduction" and u < 2) else 1


def mixed_edge_node(edge_ops, x, probs, base, mode):
    """Weighted sum over one edge's candidates as a single tape node.

    ``probs`` is the softmaxed alpha tensor (any shape); ``base`` is the flat
    offset of this edge's 8 op weights inside it. Candidate outputs are
    discarded after accumulation and recomputed during backward.
    """
    pflat = probs.data.reshape(-1)
    states = {}
    ws = None
    for k in NONZERO_OPS:
        y, states[k] = edge_ops[k].forward_state(x.data, mode)
        if ws is None:
            ws = np.zeros_like(y)
        K.axpy(ws, y, pflat[base + k])
        del y

    def bwd(g):
        need_gx = x.requires_grad
        need_gp = probs.requires_grad
        gx = None
        gp = np.zeros_like(probs.data) if need_gp else None
        gpf = gp.reshape(-1) if need_gp else None
        pgrads_all = []
        for k in NONZERO_OPS:
            op = edge_ops[k]
            y, gxk, pgrads = op.backward_state(
                pflat[base + k] * g, x.data, states[k],
                need_gx=need_gx, need_y=need_gp)
            if need_gp:
                gpf[base + k] = np.vdot(g, y)
            if need_gx:
                # backward_state hands back a fresh array; take the first one
                if gx is None:
                    gx = gxk
                else:
                    K.axpy(gx, gxk, 1.0)
            pgrads_all += pgrads
            del y, gxk
        return tuple([gx, gp] + pgrads_all)

    inputs = [x, probs]
    for k in NONZERO_OPS:
        inputs += edge_ops[k].parameters()
    return record("mixed_edge", inputs, ws, bwd)


class Cell:
    """One cell, either continuous (every edge holds all non-zero candidate
    ops) or discrete (each intermediate node holds its two genotype branches).

    preprocess0/preprocess1 may be None, meaning identity (inputs must then
    already have the operating channel count) - used by shape/equivalence
    tests.
    """

    def __init__(self, kind, channels, preprocess0, preprocess1,
                 genotype=None, affine=False, name="cell"):
        if kind not in ("normal", "reduction"):
            raise ArgumentError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.channels = channels
        self.preprocess0 = preprocess0
        self.preprocess1 = preprocess1
        self.genotype = genotype
        self.name = name
        self.edges = None
        self.branches = None
        if genotype is None:
            self.edges = []
            for e, (u, v) in enumerate(EDGES):
                s = edge_stride(kind, u)
                self.edges.append({
                    k: OpInstance(k, channels, stride=s, affine=affine,
                                  name=f"{name}.e{e}.{OP_NAMES[k]}")
                    for k in NONZERO_OPS})
        else:
            if genotype.kind != kind:
                raise ArgumentError(
                    f"genotype kind {genotype.kind} does not match cell kind {kind}")
            genotype.validate()
            self.branches = []
            for i, node in enumerate(genotype.nodes):
                pair = []
                for bi, (op_name, pred) in enumerate(node):
                    s = edge_stride(kind, pred)
                    pair.append((pred, OpInstance(
                        op_name, channels, stride=s, affine=affine,
                        name=f"{name}.n{i + 2}.b{bi}.{op_name}")))
                self.branches.append(pair)

    def init(self, rng):
        for pre in (self.preprocess0, self.preprocess1):
            if pre is not None:
                pre.init(rng)
        for op in self._all_ops():
            op.init(rng)
        return self

    def _all_ops(self):
        if self.edges is not None:
            for slot in self.edges:
                yield from slot.values()
        else:
            for pair in self.branches:
                for _, op in pair:
                    yield op

    def parameters(self):
        ps = []
        for pre in (self.preprocess0, self.preprocess1):
            if pre is not None:
                ps += pre.parameters()
        for op in self._all_ops():
            ps += op.parameters()
        return ps

    def batchnorms(self):
        bns = []
        for pre in (self.preprocess0, self.preprocess1):
            if pre is not None:
                bns += pre.batchnorms()
        for op in self._all_ops():
            bns += op.batchnorms()
        return bns

    # -- forward -------------------------------------------------------------

    def _inputs(self, s0, s1, mode):
        n0 = s0 if self.preprocess0 is None else self.preprocess0(s0, mode)
        n1 = s1 if self.preprocess1 is None else self.preprocess1(s1, mode)
        if n0.data.shape[2:] != n1.data.shape[2:]:
            raise DimensionError(
                f"cell inputs disagree after preprocessing: "
                f"{n0.data.shape} vs {n1.data.shape}")
        return n0, n1

    def forward_continuous(self, s0, s1, probs, base, mode="train"):
        """probs: Tensor holding softmaxed alphas; base: flat offset of this
        cell's (14, 8) slice inside it."""
        n0, n1 = self._inputs(s0, s1, mode)
        nodes = [n0, n1]
        e = 0
        for v in range(2, 6):
            terms = []
            for u in range(v):
                terms.append(mixed_edge_node(self.edges[e], nodes[u], probs,
                                             base + e * NUM_OPS, mode))
                e += 1
            nodes.append(add_n(terms))
        return concat_channels(nodes[2:])

    def forward_discrete(self, s0, s1, mode="train"):
        n0, n1 = self._inputs(s0, s1, mode)
        nodes = [n0, n1]
        for pair in self.branches:
            terms = [op_forward(op, nodes[pred], mode) for pred, op in pair]
            nodes.append(add_n(terms))
        return concat_channels(nodes[2:])


def mixed_edge_forward(edge_ops, x, probs, mode="train"):
    """Probability-weighted sum over the full candidate set on one edge.

    ``edge_ops`` maps non-zero op indices to OpInstances (a continuous cell's
    edge slot). ``probs`` is the 8-vector of mixing weights, ndarray or
    Tensor; it must be non-negative and sum to 1 within 1e-6. The zero op
    contributes exactly nothing and is skipped rather than materialized.
    """
    pt = probs if isinstance(probs, Tensor) else Tensor(probs)
    if pt.data.shape != (NUM_OPS,):
        raise ArgumentError(f"probs must have shape ({NUM_OPS},)")
    if pt.data.min() < 0.0 or abs(float(pt.data.sum()) - 1.0) > 1e-6:
        raise ArgumentError("probs must be non-negative and sum to 1 within 1e-6")
    return mixed_edge_node(edge_ops, x, pt, 0, mode)


def cell_forward_continuous(cell, s0, s1, edge_probs, mode="train"):
    """Spec-level continuous forward taking explicit (14, 8) edge weights."""
    p = np.asarray(edge_probs, dtype=float)
    if p.shape != (NUM_EDGES, NUM_OPS):
        raise ArgumentError(f"edge_probs must be ({NUM_EDGES}, {NUM_OPS})")
    if p.min() < 0.0 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ArgumentError("each edge's probabilities must sum to 1 within 1e-6")
    return cell.forward_continuous(s0, s1, Tensor(p), 0, mode)


def cell_forward_discrete(cell, s0, s1, genotype=None, mode="train"):
    if genotype is not None and genotype != cell.genotype:
        raise ArgumentError("cell was built for a different genotype")
    if cell.branches is None:
        raise ArgumentError("cell is continuous; build it with a genotype first")
    return cell.forward_discrete(s0, s1, mode)
