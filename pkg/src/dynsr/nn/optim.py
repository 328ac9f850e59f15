from __future__ import annotations

import numpy as np

from ..exceptions import ConfigurationError


class Adam:
    """Adam with bias-corrected moments, keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0) or eps <= 0:
            raise ConfigurationError(f"invalid Adam hyper-parameters betas={betas}, eps={eps}")
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        """Update ``params`` (name -> array, modified in place) and return it."""
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in params.items():
            g = grads[name]
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return params


def adam_step(params, grads, lr, optimizer: Adam):
    return optimizer.step(params, grads, lr)
