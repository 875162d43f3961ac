"""Adam optimizer and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moments; step counts completed updates."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1e-4, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update; returns the new parameter array."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, m {state.m.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Applies adam_step to a list of named parameters in a fixed order."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [
            AdamState.for_param(p.data, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for _, p in self.params
        ]

    def step(self) -> None:
        for (_, p), state in zip(self.params, self.states):
            if p.grad is None:
                continue
            p.data = adam_step(p.data, p.grad, state)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
               eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of the scalar f() against central differences.

    Returns the max over all parameter elements of |a - n| / max(|a|, |n|, 1e-8).
    Raises on non-finite analytic or numeric values, naming the parameter.
    """
    for _, p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = []
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite analytic gradient for parameter {name!r}")
        analytic.append(g.copy())

    worst = 0.0
    for (name, p), a_snap in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a_snap.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise ValueError(f"non-finite finite-difference value for parameter {name!r}")
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
