"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, precision


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:k]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(f: Callable[[], Tensor], params: Sequence[Parameter] | dict[str, Parameter],
                   eps: float = 1e-3, tol: float = 1e-3, max_entries: int | None = None,
                   seed: int = 0) -> GradCheckReport:
    """Compare taped gradients of ``f`` against central differences.

    The check runs in float64: parameters are promoted for its duration and
    restored afterwards. ``max_entries`` caps how many coordinates of each
    parameter are perturbed (chosen at random, always including the largest
    analytic entry); ``None`` checks every coordinate.
    """
    named = dict(params) if isinstance(params, dict) else {p.name or f"p{i}": p for i, p in enumerate(params)}
    saved = {k: (p.data, p.grad) for k, p in named.items()}
    report = GradCheckReport(eps=eps, tol=tol)
    rng = np.random.default_rng(seed)
    try:
        with precision(np.float64):
            for p in named.values():
                p.data = p.data.astype(np.float64)
                p.grad = np.zeros_like(p.data)

            def value() -> float:
                return float(f().data)

            first, second = value(), value()
            if first != second:
                raise NonDeterministicError(
                    f"objective changed between identical evaluations ({first!r} vs {second!r})")

            with Tape() as tape:
                loss = f()
            tape.backward(loss)

            for name, p in named.items():
                analytic = p.grad.copy()
                flat = p.data.reshape(-1)
                n = flat.size
                if max_entries is None or n <= max_entries:
                    idx = np.arange(n)
                else:
                    top = int(np.argmax(np.abs(analytic.reshape(-1))))
                    rest = rng.choice(n, size=max_entries - 1, replace=False)
                    idx = np.unique(np.append(rest, top))
                numeric = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = value()
                    flat[i] = orig - eps
                    down = value()
                    flat[i] = orig
                    numeric[j] = (up - down) / (2.0 * eps)
                err = relative_error(analytic.reshape(-1)[idx], numeric)
                report.errors[name] = float(err.max()) if err.size else 0.0
                report.checked[name] = int(idx.size)
    finally:
        for k, p in named.items():
            p.data, p.grad = saved[k]
    return report
