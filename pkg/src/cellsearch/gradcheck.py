"""Central-finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward


class GradCheckReport:
    def __init__(self, max_rel_error, passed, tolerance, detail=""):
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.tolerance = tolerance
        self.detail = detail

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return f"<GradCheckReport {state} max_rel_error={self.max_rel_error:.3e}>"


def _rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def grad_check(op_builder, input_shapes, tolerance=1e-4, seed=0, coords=5,
               h=1e-4, inputs=None):
    """Compare analytic gradients against central finite differences.

    ``op_builder`` maps the input Tensors to a scalar Tensor and must be a
    pure function of the inputs (re-invoking it with perturbed copies must
    give consistent values; train-mode batchnorm qualifies since it derives
    its statistics from the batch). ``coords`` random coordinates per input
    tensor are probed; the numerical derivative divides by the actually
    realized step so exactly linear paths check out with zero error.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [Tensor(rng.standard_normal(s), requires_grad=True)
                  for s in input_shapes]
    else:
        inputs = list(inputs)
        for t in inputs:
            t.requires_grad = True

    with Tape() as tape:
        loss = op_builder(*inputs)
    if loss.data.size != 1:
        raise ValueError("op_builder must produce a scalar")
    grads = backward(tape, loss, params=inputs)
    if not np.isfinite(loss.data) or any(not np.isfinite(g).all() for g in grads.values()):
        return GradCheckReport(np.inf, False, tolerance, "non-finite value in forward/backward")

    worst = 0.0
    detail = ""
    for ti, t in enumerate(inputs):
        size = t.data.size
        picks = rng.choice(size, size=min(coords, size), replace=False)
        flat = t.data.reshape(-1)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            hi = flat[j]
            f_hi = float(op_builder(*inputs).data)
            flat[j] = orig - h
            lo = flat[j]
            f_lo = float(op_builder(*inputs).data)
            flat[j] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                return GradCheckReport(np.inf, False, tolerance,
                                       f"non-finite probe at input {ti} coord {j}")
            num = (f_hi - f_lo) / (hi - lo)
            ana = float(grads[t].reshape(-1)[j])
            err = _rel_error(ana, num)
            if err > worst:
                worst = err
                detail = (f"input {ti} coord {int(j)}: analytic {ana:.6e} "
                          f"vs numeric {num:.6e}")
    return GradCheckReport(worst, worst < tolerance, tolerance, detail)
