"""Adam optimizer over named parameter collections."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteGradient


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0


class Adam:
    """Adam with bias correction; epsilon is added outside the square root:

        p -= lr * m_hat / (sqrt(v_hat) + eps)

    A non-finite gradient anywhere aborts the step before any parameter is
    touched, so a failed step never corrupts the model.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.state = AdamState(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise NonFiniteGradient(f"parameter {name!r} has no gradient")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.state.t += 1
        t = self.state.t
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.state.m[name]
            v = self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr != 0.0:
                update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
                p.data -= update.astype(p.data.dtype, copy=False)
