"""Adam with per-variable-group hyperparameters.

The inference schedule assigns different settings to trajectory states,
occupancy parameters, and network weights, so each Adam instance owns one
group of arrays and is stepped with the matching gradients. Updates are in
place; beta1 = 0 skips the first-moment buffer entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamSettings:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], settings: AdamSettings):
        self.params = params
        self.s = settings
        self.t = 0
        self.m = None if settings.beta1 == 0.0 else [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]):
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        s = self.s
        self.t += 1
        bc2 = 1.0 - s.beta2 ** self.t
        if self.m is None:
            for p, v, g in zip(self.params, self.v, grads):
                v *= s.beta2
                v += (1.0 - s.beta2) * np.square(g)
                p -= s.lr * g / (np.sqrt(v / bc2) + s.eps)
        else:
            bc1 = 1.0 - s.beta1 ** self.t
            for p, m, v, g in zip(self.params, self.m, self.v, grads):
                m *= s.beta1
                m += (1.0 - s.beta1) * g
                v *= s.beta2
                v += (1.0 - s.beta2) * np.square(g)
                p -= s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)
