"""AdamW optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class AdamW:
    """Standard Adam with bias correction; weight decay applied decoupled.

    Parameter data and gradients are repointed into fused flat buffers so
    one step is a handful of vectorized passes regardless of how many
    parameter arrays there are.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0

        total = sum(p.data.size for p in self.params)
        self._flat_p = np.empty(total)
        self._flat_g = np.zeros(total)
        self._m = np.zeros(total)
        self._v = np.zeros(total)
        self._scratch = np.empty(total)
        off = 0
        for p in self.params:
            n = p.data.size
            self._flat_p[off : off + n] = p.data.ravel()
            self._flat_g[off : off + n] = p.grad.ravel()
            p.data = self._flat_p[off : off + n].reshape(p.data.shape)
            p.grad = self._flat_g[off : off + n].reshape(p.data.shape)
            off += n

    def zero_grad(self) -> None:
        self._flat_g.fill(0.0)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        g = self._flat_g
        m, v, s = self._m, self._v, self._scratch
        m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=s)
        m += s
        v *= self.beta2
        np.multiply(g, g, out=s)
        s *= 1.0 - self.beta2
        v += s
        np.divide(v, bc2, out=s)
        np.sqrt(s, out=s)
        s += self.eps
        np.divide(m, s, out=s)
        s *= self.lr / bc1
        self._flat_p -= s
        if self.weight_decay != 0.0:
            self._flat_p -= self.lr * self.weight_decay * self._flat_p
        if not np.all(np.isfinite(self._flat_p)):
            raise FloatingPointError("non-finite parameter after optimizer step")
