import numpy as np

from cellsearch.optim import AdamState, adam_step
from cellsearch.tensor import Tensor


def test_first_step_is_signed_lr():
    p = Tensor.param(np.array([1.0, -3.0, 0.5]))
    g = np.array([0.7, -2.0, 4.0])
    st = AdamState(learning_rate=0.05)
    adam_step({"p": p}, {"p": g}, st)
    # first-step bias-correction identity: update ~ -lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.05, -3.0 + 0.05, 0.5 - 0.05],
                               atol=1e-8)
    assert st.step == 1


def test_zero_gradient_no_decay_is_identity():
    p = Tensor.param(np.array([2.0, -1.0]))
    before = p.data.copy()
    st = AdamState(learning_rate=0.3)
    adam_step({"p": p}, {"p": np.zeros(2)}, st)
    np.testing.assert_array_equal(p.data, before)


def test_two_step_quadratic_trace():
    # hand-stepped reference for f(x) = x^2 starting at x=1, lr=0.1
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    x = 1.0
    m = v = 0.0
    trace = []
    for t in range(1, 3):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(x)

    p = Tensor.param(np.array([1.0]))
    st = AdamState(learning_rate=lr)
    for t in range(2):
        adam_step({"x": p}, {"x": 2.0 * p.data}, st)
        np.testing.assert_allclose(p.data[0], trace[t], atol=1e-12)


def test_weight_decay_enters_gradient():
    p = Tensor.param(np.array([10.0]))
    st = AdamState(learning_rate=0.1, weight_decay=3e-4)
    adam_step({"p": p}, {"p": np.zeros(1)}, st)
    # effective gradient 3e-4*10 > 0 so the parameter must shrink
    assert p.data[0] < 10.0


def test_bitwise_determinism():
    rng = np.random.default_rng(0)
    init = rng.standard_normal(16)
    grads = [rng.standard_normal(16) for _ in range(5)]

    def run():
        p = Tensor.param(init.copy())
        st = AdamState(learning_rate=0.02, weight_decay=1e-3)
        for g in grads:
            adam_step({"p": p}, {"p": g.copy()}, st)
        return p.data

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()
