"""Adam optimizer over autodiff tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Standard Adam with bias correction.

    Raises if step() is called while any managed parameter has no gradient:
    a silent no-op there almost always means the loss graph lost track of a
    parameter, which we want to surface immediately.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ValueError("Adam parameters must be requires_grad tensors")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise RuntimeError(
                    "Adam.step: parameter has no gradient; run backward() first"
                )
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            mhat = self._m[i] / (1.0 - b1 ** self.t)
            vhat = self._v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
