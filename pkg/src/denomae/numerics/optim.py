"""Adam and AdamW (decoupled weight decay) with bias correction."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def _validate(lr: float, beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, b in (("beta1", beta1), ("beta2", beta2)):
        if not 0.0 < b < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {b}")
    if eps < 0 or weight_decay < 0:
        raise ValueError("eps and weight_decay must be non-negative")


def adamw_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01, zero_grad: bool = False) -> None:
    """One AdamW update of every parameter in place.

    The decay term ``lr * weight_decay * value`` is applied to the value
    before the adaptive step, independently of the gradient.
    """
    _validate(lr, beta1, beta2, eps, weight_decay)
    f = np.float32
    for p in params:
        g = p.grad.astype(np.float32, copy=False)
        p.step_count += 1
        t = p.step_count
        p.adam_m = f(beta1) * p.adam_m + f(1.0 - beta1) * g
        p.adam_v = f(beta2) * p.adam_v + f(1.0 - beta2) * (g * g)
        m_hat = p.adam_m / f(1.0 - beta1 ** t)
        v_hat = p.adam_v / f(1.0 - beta2 ** t)
        denom = np.sqrt(v_hat) + f(eps)
        update = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
        value = p.data
        if weight_decay:
            value = value - f(lr * weight_decay) * value
        p.data = (value - f(lr) * update).astype(np.float32)
        if zero_grad:
            p.zero_grad()


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, zero_grad: bool = False) -> None:
    """Plain Adam: :func:`adamw_step` with the decay fixed at zero."""
    adamw_step(params, lr, beta1, beta2, eps, weight_decay=0.0, zero_grad=zero_grad)
