"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status} (tol {self.tolerance:g})\n  " + "\n  ".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max|a - n| scaled by the largest gradient magnitude of the tensor.

    The scale never drops below ``floor``, so a gradient that is zero in
    exact arithmetic (a conv bias ahead of batchnorm, say) is judged on its
    absolute finite-difference noise instead of noise / noise.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    diff = np.abs(analytic - numeric).max(initial=0.0)
    return float(diff / scale)


def gradcheck(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
) -> GradcheckReport:
    """Compare backprop gradients of ``build()`` against central differences.

    ``build`` must rebuild the scalar loss from the current ``params`` on
    every call. With ``max_entries`` set, larger tensors are probed at that
    many randomly chosen coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = build()
    backward(loss)
    report = GradcheckReport(tolerance)
    for i, p in enumerate(params):
        name = (names[i] if names else None) or getattr(p, "name", "") or f"param{i}"
        if name in report.errors:
            name = f"{name}#{i}"
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + step
                fp = float(build().data)
                flat[k] = orig - step
                fm = float(build().data)
                flat[k] = orig
                numeric[j] = (fp - fm) / (2 * step)
        report.errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    for p in params:
        p.grad = None
    return report
