"""Adam with bias correction, over lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, NumericsError, UsageError
from .tensor import Tensor

__all__ = ["Adam"]


class Adam:
    """Standard Adam; moment buffers live with the optimizer instance."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ConfigurationError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        """One update over all parameters; requires populated grads."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"parameter {i} has no gradient; run backward first")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            new_data = p.data - update.astype(p.data.dtype)
            if not np.all(np.isfinite(new_data)):
                raise NumericsError("Adam update produced non-finite parameters")
            p.data = new_data
