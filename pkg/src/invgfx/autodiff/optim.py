"""Parameter updates: plain gradient descent and adaptive-moment descent."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from ..errors import ConfigError, UsageError
from .tensor import Tensor

MODES = ("sgd", "adam")


class OptimizerState:
    """Per-parameter moment buffers plus a strictly increasing step counter.

    ``mode="sgd"`` performs plain descent; ``mode="adam"`` keeps first and
    second moment estimates (defaults beta1=0.9, beta2=0.999, eps=1e-8).
    Gradients are zeroed after each step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, mode: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if mode not in MODES:
            raise ConfigError("optimizer mode must be one of %s, got %r" % (MODES, mode))
        if not lr > 0.0:
            raise ConfigError("learning rate must be positive, got %r" % lr)
        self.params: List[Tensor] = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise UsageError("optimizer got a non-trainable tensor %r" % (p,))
        self.lr = float(lr)
        self.mode = mode
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise UsageError("parameter %s has no gradient; run backward first"
                                 % (p.name or "<unnamed>"))
            if p.grad.shape != p.data.shape:
                raise UsageError("gradient shape %s does not match parameter %s"
                                 % (p.grad.shape, p.data.shape))
        self.step_count += 1
        if self.mode == "sgd":
            for p in self.params:
                p.data -= self.lr * p.grad
        else:
            t = self.step_count
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            for i, p in enumerate(self.params):
                g = p.grad
                self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
                self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
                mhat = self._m[i] / c1
                vhat = self._v[i] / c2
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def zero_grads(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        """Moment buffers for checkpointing, in parameter order."""
        return self._m, self._v

    def load_state_arrays(self, m, v, step_count: int) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise UsageError("moment buffer count mismatch")
        self._m = [np.asarray(a, dtype=np.float64).copy() for a in m]
        self._v = [np.asarray(a, dtype=np.float64).copy() for a in v]
        self.step_count = int(step_count)


def optimizer_step(state: OptimizerState) -> None:
    """Apply one update to every parameter held by the state."""
    state.step()
