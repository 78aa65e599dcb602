"""Gradient-descent optimizers over named parameter dicts."""

import numpy as np

from .tensor import ShapeError


class AdamState:
    """Per-parameter Adam moment buffers plus shared hyperparameters."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, state):
    """One bias-corrected Adam update; grads are read from param.grad."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**state.t)
        v_hat = v / (1.0 - b2**state.t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class SgdState:
    def __init__(self, lr=0.1, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0


def sgd_step(params, state):
    state.t += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        p.data -= state.lr * g


def make_optimizer(kind, lr, weight_decay=0.0):
    """Return (state, step_fn) for 'sgd' or 'adam'."""
    if kind == "sgd":
        return SgdState(lr=lr, weight_decay=weight_decay), sgd_step
    if kind == "adam":
        return AdamState(lr=lr, weight_decay=weight_decay), adam_step
    raise ValueError(f"unknown optimizer kind: {kind!r}")


def zero_grads(params):
    for p in params.values():
        p.grad = None
