"""Adam with bias correction and L2-style weight decay folded into the gradient."""

from __future__ import annotations

import numpy as np


class AdamState:
    """Per-parameter first/second moments plus hyperparameters.

    Moments are keyed by parameter name and created lazily with the shape of
    the gradient they track. ``step`` increases by exactly 1 per update.
    """

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 weight_decay=0.0):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)
        self.step = 0
        self.first_moment = {}
        self.second_moment = {}


def adam_step(params, grads, state):
    """One Adam update over a name->Tensor dict, in place, deterministic.

    grad += weight_decay * param, then
    m = b1*m + (1-b1)*grad;  v = b2*v + (1-b2)*grad^2
    param -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
