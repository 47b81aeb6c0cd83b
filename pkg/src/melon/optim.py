"""Adam variants used by the trainer."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a dict of named arrays, L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out

    def load(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = state[f"m.{k}"].copy()
            self.v[k] = state[f"v.{k}"].copy()
        self.t = int(state["t"][0])


class LazyAdam:
    """Adam on a flat vector that only touches coordinates present in a step.

    Per-coordinate step counts keep bias correction exact under sparse
    updates; coordinates absent from a step are left bit-identical.
    """

    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = np.zeros(size)

    def step(self, flat: np.ndarray, index: np.ndarray, grad: np.ndarray) -> None:
        """``index`` must be unique; ``grad`` aligned with it."""
        b1, b2 = self.betas
        g = grad + self.weight_decay * flat[index] if self.weight_decay else grad
        self.t[index] += 1
        t = self.t[index]
        self.m[index] = b1 * self.m[index] + (1 - b1) * g
        self.v[index] = b2 * self.v[index] + (1 - b2) * g * g
        mhat = self.m[index] / (1 - b1**t)
        vhat = self.v[index] / (1 - b2**t)
        flat[index] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = state["m"].copy(), state["v"].copy(), state["t"].copy()
