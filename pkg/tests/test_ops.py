import numpy as np
import pytest

from cellsearch.gradcheck import grad_check
from cellsearch.ops import (NUM_OPS, OP_INDEX, OP_NAMES, OpInstance,
                            op_forward, op_param_count, strided_hw)
from cellsearch.tensor import Tape, Tensor, backward, sum_all


def make_op(kind, c=8, stride=1, affine=False, seed=0):
    return OpInstance(kind, c, stride=stride, affine=affine).init(
        np.random.default_rng(seed))


def test_canonical_order_is_fixed():
    assert OP_NAMES == ("zero", "skip_connect", "maxpool_3x3", "avgpool_3x3",
                        "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3",
                        "dil_conv_5x5")
    assert NUM_OPS == 8
    assert OP_INDEX["zero"] == 0 and OP_INDEX["dil_conv_5x5"] == 7


def test_zero_op_shape_and_value():
    op = make_op("zero", c=16, stride=2)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 16, 12, 12)))
    y = op_forward(op, x)
    assert y.data.shape == (2, 16, 6, 6)
    assert np.all(y.data == 0.0)


def test_skip_stride1_is_bitwise_identity():
    op = make_op("skip_connect")
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 7, 7)))
    y = op_forward(op, x)
    assert y.data is x.data


@pytest.mark.parametrize("kind", [n for n in OP_NAMES])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(6, 6), (7, 7), (8, 8), (12, 12), (7, 12)])
def test_output_shape_contract(kind, stride, hw):
    c = 8
    op = make_op(kind, c=c, stride=stride, seed=3)
    h, w = hw
    x = Tensor(np.random.default_rng(4).standard_normal((2, c, h, w)))
    y = op_forward(op, x, mode="train")
    oh, ow = strided_hw(h, w, stride)
    assert y.data.shape == (2, c, oh, ow)
    assert np.isfinite(y.data).all()


@pytest.mark.parametrize("kind", OP_NAMES)
@pytest.mark.parametrize("c", [8, 16, 64])
@pytest.mark.parametrize("affine", [False, True])
@pytest.mark.parametrize("stride", [1, 2])
def test_param_count_matches_allocation(kind, c, affine, stride):
    op = OpInstance(kind, c, stride=stride, affine=affine)
    allocated = sum(p.data.size for p in op.parameters())
    assert op_param_count(kind, c, affine, stride=stride) == allocated


def test_param_count_hand_values():
    # two stacked depthwise+pointwise units
    assert op_param_count("sep_conv_3x3", 16, False) == 2 * (3 * 3 * 16 + 16 * 16) == 800
    assert op_param_count("dil_conv_5x5", 16, False) == 5 * 5 * 16 + 16 * 16 == 656
    assert op_param_count("zero", 123, True) == 0
    assert op_param_count("skip_connect", 16, False, stride=2) == 16 * 16
    assert op_param_count("maxpool_3x3", 16, True) == 32


def test_zero_backward_is_exactly_zero():
    x = Tensor(np.random.default_rng(5).standard_normal((1, 4, 6, 6)),
               requires_grad=True)
    op = make_op("zero", c=4)
    with Tape() as tape:
        y = op_forward(op, x)
        loss = sum_all(y)
    grads = backward(tape, loss, params=[x])
    assert np.all(grads[x] == 0.0)


@pytest.mark.parametrize("kind,stride", [
    ("sep_conv_3x3", 1), ("sep_conv_3x3", 2),
    ("sep_conv_5x5", 1),
    ("dil_conv_3x3", 1), ("dil_conv_3x3", 2),
    ("dil_conv_5x5", 2),
    ("maxpool_3x3", 1), ("avgpool_3x3", 2),
    ("skip_connect", 2),
])
def test_blocks_pass_gradcheck(kind, stride):
    op = make_op(kind, c=4, stride=stride, seed=11)

    def f(x):
        return sum_all(op_forward(op, x, mode="train"))

    rep = grad_check(f, [(2, 4, 6, 6)], tolerance=1e-4, seed=12)
    assert rep.passed, f"{kind}@{stride}: {rep.detail}"


def test_sep_conv_gradcheck_on_spec_shape():
    op = make_op("sep_conv_3x3", c=4, seed=13)

    def f(x):
        return sum_all(op_forward(op, x, mode="train"))

    rep = grad_check(f, [(1, 4, 8, 8)], tolerance=1e-4, seed=14)
    assert rep.passed, rep.detail


def test_affine_blocks_pass_gradcheck():
    for kind in ("sep_conv_3x3", "avgpool_3x3", "dil_conv_5x5"):
        op = make_op(kind, c=4, affine=True, seed=15)

        def f(x):
            return sum_all(op_forward(op, x, mode="train"))

        rep = grad_check(f, [(2, 4, 6, 6)], tolerance=1e-4, seed=16)
        assert rep.passed, f"{kind}: {rep.detail}"


def test_parameter_gradients_checked():
    op = make_op("dil_conv_3x3", c=3, seed=17)
    xv = np.random.default_rng(18).standard_normal((2, 3, 6, 6))
    x = Tensor(xv)
    params = op.parameters()

    def f(*_):
        return sum_all(op_forward(op, x, mode="train"))

    rep = grad_check(f, None, tolerance=1e-4, seed=19, inputs=params)
    assert rep.passed, rep.detail


def test_odd_spatial_dims_halve_with_ceil():
    for kind in OP_NAMES:
        op = make_op(kind, c=4, stride=2, seed=20)
        x = Tensor(np.random.default_rng(21).standard_normal((1, 4, 7, 9)))
        y = op_forward(op, x)
        assert y.data.shape[2:] == (4, 5), kind
