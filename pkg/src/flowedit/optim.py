"""Adam optimizer with global gradient-norm clipping."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction; clips the global grad norm first.

    Parameter updates are the single sanctioned mutation of leaf tensors.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def clip_gradients(self) -> float:
        total = 0.0
        for p in self.params.values():
            total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if self.grad_clip is not None and norm > self.grad_clip > 0:
            factor = np.float32(self.grad_clip / norm)
            for p in self.params.values():
                p.grad *= factor
        return norm

    def step(self) -> None:
        self.clip_gradients()
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            m_hat = self.m[k] / np.float32(bias1)
            v_hat = self.v[k] / np.float32(bias2)
            p.data -= (np.float32(self.lr) * m_hat / (np.sqrt(v_hat) + np.float32(self.eps))).astype(np.float32)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
