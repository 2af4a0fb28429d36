"""Architecture parameters: per-cell (14 edges x 8 ops) tensors, split by
cell kind, with softmax probabilities, network entropy, and discrete
genotype derivation.

Every network position owns its own alpha slice: N-2 normal slices plus 2
reduction slices (reduction cells sit at floor(N/3) and floor(2N/3)). No
sharing across cells of the same kind.
"""

from __future__ import annotations

import numpy as np

from .cell import EDGES, NUM_EDGES
from .errors import ArgumentError
from .genotype import Genotype
from .ops import NUM_OPS, OP_NAMES, ZERO
from .tensor import Tensor

ALPHA_INIT_STD = 1e-3


def reduction_positions(num_cells):
    if num_cells < 3:
        raise ArgumentError("need at least 3 cells for two distinct reduction positions")
    p = (num_cells // 3, (2 * num_cells) // 3)
    if p[0] == p[1]:
        raise ArgumentError(f"reduction positions collide for N={num_cells}")
    return p


class AlphaSet:
    """normal: (N-2, 14, 8) tensor; reduction: (2, 14, 8) tensor; plus the
    position -> (kind, within-kind index) map."""

    def __init__(self, num_cells, normal, reduction):
        self.num_cells = num_cells
        self.normal = normal if isinstance(normal, Tensor) else Tensor.param(
            normal, "alpha.normal")
        self.reduction = reduction if isinstance(reduction, Tensor) else Tensor.param(
            reduction, "alpha.reduction")
        red = set(reduction_positions(num_cells))
        self.cell_index_map = []
        ni = ri = 0
        for pos in range(num_cells):
            if pos in red:
                self.cell_index_map.append(("reduction", ri))
                ri += 1
            else:
                self.cell_index_map.append(("normal", ni))
                ni += 1
        if self.normal.data.shape != (ni, NUM_EDGES, NUM_OPS):
            raise ArgumentError(
                f"normal alphas must be {(ni, NUM_EDGES, NUM_OPS)}, "
                f"got {self.normal.data.shape}")
        if self.reduction.data.shape != (ri, NUM_EDGES, NUM_OPS):
            raise ArgumentError(
                f"reduction alphas must be {(ri, NUM_EDGES, NUM_OPS)}, "
                f"got {self.reduction.data.shape}")

    def tensors(self):
        return {"alpha.normal": self.normal, "alpha.reduction": self.reduction}

    def slice_for_position(self, pos):
        kind, idx = self.cell_index_map[pos]
        t = self.normal if kind == "normal" else self.reduction
        return t.data[idx]

    def all_slices(self):
        return [self.slice_for_position(p) for p in range(self.num_cells)]


def init_alphas(num_cells, seed=0):
    """I.i.d. Gaussian(0, 1e-3) entries; near-uniform edge probabilities."""
    positions = reduction_positions(num_cells)  # validates num_cells
    rng = np.random.default_rng(seed)
    n_norm = num_cells - 2
    # one deterministic stream, normal block first
    normal = rng.standard_normal((n_norm, NUM_EDGES, NUM_OPS)) * ALPHA_INIT_STD
    reduction = rng.standard_normal((2, NUM_EDGES, NUM_OPS)) * ALPHA_INIT_STD
    del positions
    return AlphaSet(num_cells, normal, reduction)


def edge_probabilities(alpha_edge):
    """Stable softmax of one edge's 8 alphas; positive, sums to 1 within 1e-12."""
    a = np.asarray(alpha_edge, dtype=float)
    if not np.isfinite(a).all():
        raise ArgumentError("alphas must be finite")
    e = np.exp(a - a.max())
    return e / e.sum()


def network_entropy(alphas):
    """Shannon entropy (natural log) summed over every edge distribution of
    every cell slice: H = -sum p ln p, with 0 ln 0 := 0."""
    total = 0.0
    for sl in [alphas.normal.data, alphas.reduction.data]:
        a = sl - sl.max(axis=-1, keepdims=True)
        e = np.exp(a)
        p = e / e.sum(axis=-1, keepdims=True)
        logp = np.where(p > 0.0, np.log(np.maximum(p, 1e-300)), 0.0)
        total -= float((p * logp).sum())
    return total


def max_entropy(num_cells):
    return num_cells * NUM_EDGES * np.log(NUM_OPS)


def derive_genotype(alpha_slice, kind="normal"):
    """Top-2 predecessors per intermediate node by non-zero edge strength,
    argmax non-zero op on each kept edge; ties break toward the smaller index."""
    a = np.asarray(alpha_slice, dtype=float)
    if a.shape != (NUM_EDGES, NUM_OPS):
        raise ArgumentError(f"alpha slice must be ({NUM_EDGES}, {NUM_OPS})")
    edge_of = {(u, v): e for e, (u, v) in enumerate(EDGES)}
    nodes = []
    for v in range(2, 6):
        strengths = []
        for u in range(v):
            p = edge_probabilities(a[edge_of[(u, v)]])
            pnz = np.delete(p, ZERO)
            strengths.append((-pnz.max(), u))
        strengths.sort()  # descending strength, ascending predecessor on ties
        keep = sorted(u for _, u in strengths[:2])
        branches = []
        for u in keep:
            p = edge_probabilities(a[edge_of[(u, v)]])
            p = p.copy()
            p[ZERO] = -np.inf
            op = int(np.argmax(p))  # argmax returns the first (smallest) index on ties
            branches.append((OP_NAMES[op], u))
        nodes.append(branches)
    return Genotype(kind, nodes)


def derive_all(alphas):
    """One genotype per network position via the cell index map."""
    out = []
    for pos in range(alphas.num_cells):
        kind, _ = alphas.cell_index_map[pos]
        out.append(derive_genotype(alphas.slice_for_position(pos), kind))
    return out


def derive_shared(alphas):
    """Collapse each cell kind to the entropy-weighted average of its slices
    and derive a single genotype per kind, replicated over positions."""
    shared = {}
    for kind, tensor in (("normal", alphas.normal), ("reduction", alphas.reduction)):
        slices = tensor.data
        ents = []
        for sl in slices:
            h = 0.0
            for edge in sl:
                p = edge_probabilities(edge)
                h -= float((p * np.log(p)).sum())
            ents.append(h)
        w = np.asarray(ents)
        w = np.full(len(slices), 1.0 / len(slices)) if w.sum() == 0 else w / w.sum()
        avg = np.tensordot(w, slices, axes=(0, 0))
        shared[kind] = derive_genotype(avg, kind)
    return [Genotype(shared[kind].kind, shared[kind].nodes)
            for kind, _ in alphas.cell_index_map]
