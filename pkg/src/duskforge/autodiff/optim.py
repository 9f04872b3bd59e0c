"""First-order optimizers operating on :class:`Parameter` lists in place."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float) -> list[np.ndarray]:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    out = []
    for p, g in zip(params, grads):
        if g is None:
            out.append(p)
            continue
        if g.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, g.shape)
        out.append((p - lr * g).astype(p.dtype))
    return out


def adam_step(params, grads, m, v, step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update; ``step`` counts from 1.

    Returns ``(new_params, new_m, new_v)``; inputs are not modified.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    c1 = 1 - beta1 ** step
    c2 = 1 - beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            new_p.append(p), new_m.append(mi), new_v.append(vi)
            continue
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if weight_decay:
            g = g + weight_decay * p
        mi = beta1 * mi + (1 - beta1) * g
        vi = beta2 * vi + (1 - beta2) * g * g
        upd = lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        new_p.append((p - upd).astype(p.dtype))
        new_m.append(mi.astype(p.dtype))
        new_v.append(vi.astype(p.dtype))
    return new_p, new_m, new_v


class Optimizer:
    def __init__(self, named_params, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.named_params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    def step(self, lr: float | None = None) -> None:
        params = self.params
        new = sgd_step([p.data for p in params], [p.grad for p in params], lr or self.lr)
        for p, d in zip(params, new):
            p.data = d


class Adam(Optimizer):
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(named_params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        params = self.params
        new_p, self.m, self.v = adam_step(
            [p.data for p in params], [p.grad for p in params], self.m, self.v, self.t,
            lr or self.lr, *self.betas, eps=self.eps, weight_decay=self.weight_decay)
        for p, d in zip(params, new_p):
            p.data = d

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.asarray(float(self.t), dtype=np.float64)}
        for (name, _), mi, vi in zip(self.named_params, self.m, self.v):
            state[f"m/{name}"] = mi.copy()
            state[f"v/{name}"] = vi.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["step"])
        for i, (name, p) in enumerate(self.named_params):
            self.m[i] = np.asarray(state[f"m/{name}"], dtype=p.dtype).copy()
            self.v[i] = np.asarray(state[f"v/{name}"], dtype=p.dtype).copy()


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    """Cosine decay from ``base`` at step 0 to ``floor`` at ``total``."""
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * frac))
