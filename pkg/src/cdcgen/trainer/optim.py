"""Adam with bias correction, keyed by parameter name."""

import numpy as np

from cdcgen.diffmath.tensor import ShapeError


class AdamState:
    def __init__(self, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {}
        self.v = {}

    def copy(self):
        new = AdamState(self.lr, self.beta1, self.beta2, self.eps)
        new.step = self.step
        new.m = {k: a.copy() for k, a in self.m.items()}
        new.v = {k: a.copy() for k, a in self.v.items()}
        return new


def adam_step(state, params, grads):
    """One bias-corrected Adam update, in place on ``params`` (name -> array)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Optimizer over a fixed, named parameter set of one network group."""

    def __init__(self, named_params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = {name: p for name, p in named_params if p.requires_grad}
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        data = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.state, data, grads)

    def owns(self, tensor):
        return any(tensor is p for p in self.params.values())
