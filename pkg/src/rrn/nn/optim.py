from __future__ import annotations

import numpy as np

from ..errors import ShapeError, TrainingError


class Adam:
    """Adam over a named parameter store.

    ``params`` maps names to :class:`~rrn.nn.layers.Param`; first and second
    moments are kept per parameter with matching shapes.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, grads=None):
        """One update. ``grads`` overrides the gradients stored on the params."""
        grads = grads if grads is not None else {k: p.grad for k, p in self.params.items()}
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise TrainingError(f"non-finite gradient in {name} ({bad} entries) at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name].value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
                "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)
