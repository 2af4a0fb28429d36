"""Full network assembly: stem, N stacked cells with the doubling channel
schedule, and the embedding/classifier head.

Reduction cells sit at floor(N/3) and floor(2N/3) (zero-based) and operate at
doubled channels, so the per-cell operating channels for N=8, C=16 are
[16,16,32,32,32,64,64,64] and the head sees 4*(4C) features after the global
average pool. The head is GAP -> linear to the embedding -> linear to the
speaker logits (no activation between them).
"""

from __future__ import annotations

import numpy as np

from .alphas import AlphaSet, reduction_positions
from .cell import Cell, Preprocess, PreprocessReduce
from .errors import ConfigError, DimensionError
from .genotype import Genotype
from .ops import op_param_count
from .tensor import (BatchNorm, Tensor, batchnorm, conv2d, global_avg_pool,
                     linear, softmax_last)

MIN_FRAMES = 12


class NetworkConfig:
    def __init__(self, num_cells=8, init_channels=16, num_speakers=2,
                 embedding_dim=128, input_frames=300, mode="derived"):
        self.num_cells = int(num_cells)
        self.init_channels = int(init_channels)
        self.num_speakers = int(num_speakers)
        self.embedding_dim = int(embedding_dim)
        self.input_frames = int(input_frames)
        self.mode = mode
        if self.num_cells < 3:
            raise ConfigError("num_cells must be >= 3")
        if self.init_channels < 1:
            raise ConfigError("init_channels must be >= 1")
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if mode not in ("search", "derived"):
            raise ConfigError(f"unknown network mode {mode!r}")
        reduction_positions(self.num_cells)  # must be distinct

    def to_dict(self):
        return {"num_cells": self.num_cells, "init_channels": self.init_channels,
                "num_speakers": self.num_speakers, "embedding_dim": self.embedding_dim,
                "input_frames": self.input_frames, "mode": self.mode}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def channel_schedule(num_cells, init_channels):
    red = set(reduction_positions(num_cells))
    chans, c = [], init_channels
    for pos in range(num_cells):
        if pos in red:
            c *= 2
        chans.append(c)
    return chans


class Network:
    def __init__(self, cfg, genotypes=None, seed=0):
        self.cfg = cfg
        self.genotypes = genotypes
        affine = cfg.mode == "derived"
        c = cfg.init_channels
        self.stem_w = Tensor.param(np.zeros((c, 1, 3, 3)), "stem.conv")
        self.stem_bn = BatchNorm(c, affine=affine, name="stem.bn")
        red = set(reduction_positions(cfg.num_cells))
        chans = channel_schedule(cfg.num_cells, cfg.init_channels)

        self.cells = []
        c_pp, c_p = c, c  # output channels of cells k-2 and k-1 (stem for both)
        reduction_prev = False
        for pos in range(cfg.num_cells):
            kind = "reduction" if pos in red else "normal"
            c_op = chans[pos]
            pre0_cls = PreprocessReduce if reduction_prev else Preprocess
            pre0 = pre0_cls(c_pp, c_op, affine=affine, name=f"cell{pos}.pre0")
            pre1 = Preprocess(c_p, c_op, affine=affine, name=f"cell{pos}.pre1")
            g = genotypes[pos] if genotypes is not None else None
            cell = Cell(kind, c_op, pre0, pre1, genotype=g, affine=affine,
                        name=f"cell{pos}")
            self.cells.append(cell)
            c_pp, c_p = c_p, 4 * c_op
            reduction_prev = kind == "reduction"

        feat = c_p  # 4 * last operating channels
        self.embed_w = Tensor.param(np.zeros((cfg.embedding_dim, feat)), "head.embed.w")
        self.embed_b = Tensor.param(np.zeros(cfg.embedding_dim), "head.embed.b")
        self.cls_w = Tensor.param(np.zeros((cfg.num_speakers, cfg.embedding_dim)),
                                  "head.cls.w")
        self.cls_b = Tensor.param(np.zeros(cfg.num_speakers), "head.cls.b")
        self.init(np.random.default_rng(seed))

    def init(self, rng):
        self.stem_w.data[:] = rng.standard_normal(self.stem_w.data.shape) * np.sqrt(2.0 / 9)
        for cell in self.cells:
            cell.init(rng)
        fe = self.embed_w.data.shape[1]
        self.embed_w.data[:] = rng.standard_normal(self.embed_w.data.shape) / np.sqrt(fe)
        self.embed_b.data[:] = 0.0
        self.cls_w.data[:] = rng.standard_normal(self.cls_w.data.shape) / np.sqrt(
            self.cfg.embedding_dim)
        self.cls_b.data[:] = 0.0
        return self

    # -- state ----------------------------------------------------------------

    def parameters(self):
        ps = [self.stem_w]
        if self.stem_bn.affine:
            ps += [self.stem_bn.gamma, self.stem_bn.beta]
        for cell in self.cells:
            ps += cell.parameters()
        ps += [self.embed_w, self.embed_b, self.cls_w, self.cls_b]
        return ps

    def parameters_dict(self):
        d = {}
        for p in self.parameters():
            if p.name in d:
                raise ConfigError(f"duplicate parameter name {p.name}")
            d[p.name] = p
        return d

    def batchnorms(self):
        bns = [self.stem_bn]
        for cell in self.cells:
            bns += cell.batchnorms()
        return bns

    def buffers_dict(self):
        d = {}
        for bn in self.batchnorms():
            d[f"{bn.name}.running_mean"] = bn.running_mean
            d[f"{bn.name}.running_var"] = bn.running_var
        return d

    # -- forward ----------------------------------------------------------------

    def _check_input(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise DimensionError(f"expected (batch, 1, freq, frames), got {x.data.shape}")
        if x.data.shape[2] < MIN_FRAMES or x.data.shape[3] < MIN_FRAMES:
            raise DimensionError(
                f"input spatial dims {x.data.shape[2:]} below the {MIN_FRAMES}-frame "
                "minimum for two reductions")

    def _stem(self, x, mode):
        return batchnorm(conv2d(x, self.stem_w, padding=1), self.stem_bn, mode)

    def _head(self, feat, mode):
        pooled = global_avg_pool(feat)
        emb = linear(pooled, self.embed_w, self.embed_b)
        logits = linear(emb, self.cls_w, self.cls_b)
        return emb, logits

    def forward_derived(self, x, mode="train"):
        self._check_input(x)
        s = self._stem(x, mode)
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell.forward_discrete(s0, s1, mode)
        _, logits = self._head(s1, mode)
        return logits

    def forward_search(self, x, alphas, mode="train", alpha_grad=True):
        """Continuous supernet forward. With alpha_grad=False the softmaxed
        probabilities enter as constants, so no gradient reaches the alphas."""
        self._check_input(x)
        if alphas.num_cells != self.cfg.num_cells:
            raise ConfigError("alpha set size does not match the network")
        if alpha_grad:
            probs = {"normal": softmax_last(alphas.normal),
                     "reduction": softmax_last(alphas.reduction)}
        else:
            probs = {k: Tensor(_softmax_np(t.data))
                     for k, t in (("normal", alphas.normal),
                                  ("reduction", alphas.reduction))}
        s = self._stem(x, mode)
        s0 = s1 = s
        slice_len = alphas.normal.data.shape[1] * alphas.normal.data.shape[2]
        for pos, cell in enumerate(self.cells):
            kind, idx = alphas.cell_index_map[pos]
            out = cell.forward_continuous(s0, s1, probs[kind], idx * slice_len, mode)
            s0, s1 = s1, out
        _, logits = self._head(s1, mode)
        return logits

    def forward(self, x, mode="train", alphas=None, alpha_grad=True):
        if self.cfg.mode == "search":
            return self.forward_search(x, alphas, mode, alpha_grad)
        return self.forward_derived(x, mode)

    def embed(self, x, mode="eval"):
        self._check_input(x)
        s = self._stem(x, mode)
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell.forward_discrete(s0, s1, mode)
        emb, _ = self._head(s1, mode)
        return emb


def _softmax_np(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_network(cfg, alphas=None, genotypes=None, seed=0):
    """Assemble the stacked-cell network; search mode wants an AlphaSet of
    matching size, derived mode a genotype list of length N."""
    if cfg.mode == "search":
        if alphas is not None and alphas.num_cells != cfg.num_cells:
            raise ConfigError(
                f"alphas cover {alphas.num_cells} cells, network has {cfg.num_cells}")
        return Network(cfg, genotypes=None, seed=seed)
    if genotypes is None:
        raise ConfigError("derived mode needs genotypes")
    if len(genotypes) != cfg.num_cells:
        raise ConfigError(
            f"genotype list has {len(genotypes)} cells, network needs {cfg.num_cells}")
    red = set(reduction_positions(cfg.num_cells))
    for pos, g in enumerate(genotypes):
        want = "reduction" if pos in red else "normal"
        if g.kind != want:
            raise ConfigError(f"cell {pos} must be {want}, genotype says {g.kind}")
    return Network(cfg, genotypes=genotypes, seed=seed)


def extract_embedding(net, spec_values, mode="eval"):
    """L2-normalized pre-classifier embedding of one (freq x frames) spectrogram."""
    x = Tensor(np.asarray(spec_values, dtype=float)[None, None])
    emb = net.embed(x, mode).data[0]
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        raise DimensionError("zero embedding cannot be normalized")
    return emb / norm


def count_parameters(net):
    """Exact count of trainable scalars (runtime tally over allocations)."""
    return sum(p.data.size for p in net.parameters())


def analytic_parameter_count(genotypes, cfg):
    """Per-layer ledger assembled from closed-form terms, independent of any
    network construction: stem + preprocessing + per-branch op counts + head."""
    affine = cfg.mode == "derived"
    bn2 = (lambda ch: 2 * ch) if affine else (lambda ch: 0)
    c = cfg.init_channels
    total = 9 * c + bn2(c)  # stem 3x3 conv (1->C) + BN
    red = set(reduction_positions(cfg.num_cells))
    chans = channel_schedule(cfg.num_cells, cfg.init_channels)
    c_pp, c_p = c, c
    reduction_prev = False
    for pos in range(cfg.num_cells):
        c_op = chans[pos]
        # preprocess0 (plain 1x1 or factorized reduce: both c_in*c_out) + BN
        total += c_pp * c_op + bn2(c_op)
        total += c_p * c_op + bn2(c_op)
        kind = "reduction" if pos in red else "normal"
        for node in genotypes[pos].nodes:
            for op_name, pred in node:
                stride = 2 if (kind == "reduction" and pred < 2) else 1
                total += op_param_count(op_name, c_op, affine, stride=stride)
        c_pp, c_p = c_p, 4 * c_op
        reduction_prev = kind == "reduction"
    feat = c_p
    total += feat * cfg.embedding_dim + cfg.embedding_dim
    total += cfg.embedding_dim * cfg.num_speakers + cfg.num_speakers
    return total
