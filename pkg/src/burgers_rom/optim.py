"""Adam optimizer for lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import NumericsError, UsageError


class AdamState:
    """Per-parameter first/second moment accumulators plus the step counter.

    One instance owns one parameter list for the lifetime of a training loop.
    Updates are the standard bias-corrected rule.
    """

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise UsageError("gradient list does not match the parameter list")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise UsageError(
                    f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
                )
            if not np.all(np.isfinite(g)):
                raise NumericsError(
                    f"NaN gradient for parameter {p.name or '<unnamed>'} "
                    f"at step {self.step_count}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: AdamState, params, grads) -> list[Tensor]:
    """Apply one Adam update; ``params`` must be the list the state was built for."""
    params = list(params)
    if len(params) != len(state.params) or any(
        a is not b for a, b in zip(params, state.params)
    ):
        raise UsageError("params do not match the optimizer state")
    state.step(grads)
    return params
