"""Adam with per-group learning rates (backbone vs. everything else)."""

from __future__ import annotations

import numpy as np

from mscada.tensor import Tensor


class Adam:
    """Standard Adam with bias correction over named parameter groups.

    groups: list of (name -> Tensor dict, learning_rate). Names must be
    unique across groups; update order follows group then insertion order,
    which keeps training bitwise reproducible.
    """

    def __init__(self, groups: list[tuple[dict[str, Tensor], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = [(dict(params), float(lr)) for params, lr in groups]
        seen: set[str] = set()
        for params, lr in self.groups:
            if lr <= 0:
                raise ValueError(f"learning rate must be positive, got {lr}")
            dup = seen & params.keys()
            if dup:
                raise ValueError(f"parameter(s) {sorted(dup)} appear in more than one group")
            seen |= params.keys()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params.values():
                p.zero_grad()

    def step(self) -> None:
        for params, lr in self.groups:
            for name, p in params.items():
                g = p.grad
                if g is None:
                    continue
                st = self.state.setdefault(
                    name, {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
                st["step"] += 1
                t = st["step"]
                m, v = st["m"], st["v"]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                m_hat = m / (1.0 - self.beta1 ** t)
                v_hat = v / (1.0 - self.beta2 ** t)
                p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
