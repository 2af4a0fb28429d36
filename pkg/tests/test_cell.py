import numpy as np
import pytest

from cellsearch.cell import (EDGES, NONZERO_OPS, NUM_EDGES, Cell, Preprocess,
                             PreprocessReduce, cell_forward_continuous,
                             cell_forward_discrete, edge_stride,
                             mixed_edge_forward)
from cellsearch.errors import ArgumentError
from cellsearch.genotype import Genotype
from cellsearch.ops import NUM_OPS, OP_INDEX, op_forward
from cellsearch.tensor import Tape, Tensor, backward, softmax_last, sum_all


def cont_cell(kind="normal", c=8, seed=0, identity_pre=True):
    rng = np.random.default_rng(seed)
    if identity_pre:
        cell = Cell(kind, c, None, None)
    else:
        cell = Cell(kind, c, Preprocess(c, c), Preprocess(c, c))
    return cell.init(rng)


def test_edge_enumeration():
    assert NUM_EDGES == 14
    assert EDGES[0] == (0, 2) and EDGES[1] == (1, 2)
    assert EDGES[-1] == (4, 5)
    assert sum(1 for u, v in EDGES) == sum(2 + i for i in range(4))


def test_reduction_strides_only_on_input_edges():
    for u, v in EDGES:
        s = edge_stride("reduction", u)
        assert s == (2 if u < 2 else 1)
        assert edge_stride("normal", u) == 1


# ---------------------------------------------------------------------------
# mixed edge


def test_mixed_edge_one_hot_skip_is_identity():
    cell = cont_cell()
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 6, 6)))
    probs = np.zeros(NUM_OPS)
    probs[OP_INDEX["skip_connect"]] = 1.0
    y = mixed_edge_forward(cell.edges[0], x, probs)
    np.testing.assert_array_equal(y.data, x.data)


def test_mixed_edge_uniform_is_mean_of_ops():
    cell = cont_cell(seed=2)
    x = Tensor(np.random.default_rng(3).standard_normal((1, 8, 6, 6)))
    probs = np.full(NUM_OPS, 1.0 / NUM_OPS)
    y = mixed_edge_forward(cell.edges[0], x, probs)
    acc = np.zeros_like(y.data)
    for k in range(NUM_OPS):
        if k == 0:
            continue  # zero op adds nothing
        acc += op_forward(cell.edges[0][k], x, "train").data / NUM_OPS
    np.testing.assert_allclose(y.data, acc, atol=1e-12)


def test_mixed_edge_matches_explicit_sum_oracle():
    cell = cont_cell(seed=4)
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    raw = rng.random(NUM_OPS) + 0.05
    probs = raw / raw.sum()
    y = mixed_edge_forward(cell.edges[3], x, probs)
    acc = np.zeros_like(y.data)
    for k in range(NUM_OPS):
        if k == 0:
            continue
        acc += probs[k] * op_forward(cell.edges[3][k], x, "train").data
    np.testing.assert_allclose(y.data, acc, atol=1e-10)


def test_mixed_edge_probability_sum_violation():
    cell = cont_cell(seed=6)
    x = Tensor(np.zeros((1, 8, 6, 6)))
    bad = np.full(NUM_OPS, 0.2)
    with pytest.raises(ArgumentError):
        mixed_edge_forward(cell.edges[0], x, bad)
    with pytest.raises(ArgumentError):
        mixed_edge_forward(cell.edges[0], x, np.array([1.5, -0.5] + [0.0] * 6))


# ---------------------------------------------------------------------------
# continuous cell


def test_continuous_output_channels_4c():
    cell = cont_cell(c=16, seed=7, identity_pre=False)
    x = Tensor(np.random.default_rng(8).standard_normal((2, 16, 6, 6)))
    p = np.full((NUM_EDGES, NUM_OPS), 1.0 / NUM_OPS)
    y = cell_forward_continuous(cell, x, x, p)
    assert y.data.shape == (2, 64, 6, 6)


def test_continuous_all_zero_probs_gives_zeros():
    cell = cont_cell(c=8, seed=9)
    x = Tensor(np.random.default_rng(10).standard_normal((2, 8, 6, 6)))
    p = np.zeros((NUM_EDGES, NUM_OPS))
    p[:, 0] = 1.0  # one-hot on the zero op everywhere
    y = cell_forward_continuous(cell, x, x, p)
    assert np.all(y.data == 0.0)


def test_reduction_cell_halves_12x12():
    cell = cont_cell("reduction", c=16, seed=11, identity_pre=False)
    x = Tensor(np.random.default_rng(12).standard_normal((2, 16, 12, 12)))
    p = np.full((NUM_EDGES, NUM_OPS), 1.0 / NUM_OPS)
    y = cell_forward_continuous(cell, x, x, p)
    assert y.data.shape == (2, 64, 6, 6)


def test_gradient_reaches_every_edge_parameter():
    cell = cont_cell(c=4, seed=13, identity_pre=False)
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    alphas = Tensor(rng.standard_normal((NUM_EDGES, NUM_OPS)) * 0.1,
                    requires_grad=True)
    params = cell.parameters()
    with Tape() as tape:
        probs = softmax_last(alphas)
        y = cell.forward_continuous(x, x, probs, 0, "train")
        loss = sum_all(y)
    grads = backward(tape, loss, params=params + [alphas])
    for p in params:
        assert np.any(grads[p] != 0.0), f"dead parameter {p.name}"
    assert np.all(np.isfinite(grads[alphas]))
    assert np.any(grads[alphas] != 0.0)


# ---------------------------------------------------------------------------
# discrete cell


def skip_genotype():
    return Genotype("normal", [
        [("skip_connect", 0), ("skip_connect", 1)],
        [("skip_connect", 0), ("skip_connect", 1)],
        [("skip_connect", 0), ("skip_connect", 1)],
        [("skip_connect", 0), ("skip_connect", 1)],
    ])


def test_all_skip_discrete_cell_sums_inputs():
    g = skip_genotype()
    cell = Cell("normal", 8, None, None, genotype=g).init(np.random.default_rng(0))
    rng = np.random.default_rng(15)
    a, b = rng.standard_normal((1, 8, 5, 5)), rng.standard_normal((1, 8, 5, 5))
    y = cell_forward_discrete(cell, Tensor(a), Tensor(b))
    np.testing.assert_array_equal(y.data[:, :8], a + b)
    assert y.data.shape == (1, 32, 5, 5)


def test_discrete_matches_one_hot_continuous():
    rng = np.random.default_rng(16)
    g = Genotype("normal", [
        [("sep_conv_3x3", 0), ("maxpool_3x3", 1)],
        [("skip_connect", 0), ("dil_conv_3x3", 2)],
        [("avgpool_3x3", 1), ("sep_conv_5x5", 3)],
        [("dil_conv_5x5", 0), ("skip_connect", 4)],
    ])
    cont = cont_cell(c=4, seed=17)
    disc = Cell("normal", 4, None, None, genotype=g)
    # share weights and running stats: copy from the matching continuous slot
    edge_of = {(u, v): e for e, (u, v) in enumerate(EDGES)}
    for i, node in enumerate(g.nodes):
        for bi, (op_name, pred) in enumerate(node):
            src = cont.edges[edge_of[(pred, i + 2)]][OP_INDEX[op_name]]
            dst = disc.branches[i][bi][1]
            for ps, pd in zip(src.parameters(), dst.parameters()):
                pd.data[:] = ps.data
    probs = np.zeros((NUM_EDGES, NUM_OPS))
    probs[:, 0] = 1.0
    for i, node in enumerate(g.nodes):
        for op_name, pred in node:
            e = edge_of[(pred, i + 2)]
            probs[e] = 0.0
            probs[e, OP_INDEX[op_name]] = 1.0
    x0 = Tensor(rng.standard_normal((2, 4, 6, 6)))
    x1 = Tensor(rng.standard_normal((2, 4, 6, 6)))
    yc = cell_forward_continuous(cont, x0, x1, probs)
    yd = cell_forward_discrete(disc, x0, x1)
    np.testing.assert_allclose(yd.data, yc.data, atol=1e-9)


def test_reduction_genotype_shape():
    g = Genotype("reduction", [
        [("maxpool_3x3", 0), ("sep_conv_3x3", 1)],
        [("skip_connect", 2), ("avgpool_3x3", 0)],
        [("dil_conv_3x3", 1), ("sep_conv_5x5", 2)],
        [("skip_connect", 0), ("dil_conv_5x5", 3)],
    ])
    pre0 = Preprocess(16, 16)
    pre1 = Preprocess(16, 16)
    cell = Cell("reduction", 16, pre0, pre1, genotype=g).init(np.random.default_rng(18))
    x = Tensor(np.random.default_rng(19).standard_normal((2, 16, 12, 12)))
    y = cell_forward_discrete(cell, x, x)
    assert y.data.shape == (2, 64, 6, 6)


def test_invalid_genotype_rejected_before_compute():
    with pytest.raises(Exception):
        Genotype("normal", [[("skip_connect", 0), ("skip_connect", 0)]] * 4)
    with pytest.raises(Exception):
        Genotype("normal", [[("zero", 0), ("skip_connect", 1)]] * 4)
    with pytest.raises(Exception):
        Genotype("normal", [[("skip_connect", 0), ("skip_connect", 5)]] * 4)


def test_preprocess_reduce_aligns_spatial():
    pre0 = PreprocessReduce(8, 16).init(np.random.default_rng(20))
    x = Tensor(np.random.default_rng(21).standard_normal((1, 8, 12, 12)))
    y = pre0(x, "train")
    assert y.data.shape == (1, 16, 6, 6)
    x7 = Tensor(np.random.default_rng(22).standard_normal((1, 8, 7, 9)))
    assert pre0(x7, "train").data.shape == (1, 16, 4, 5)
