"""Central finite-difference gradient checker.

The checker re-runs the target function in float64 and compares analytic
gradients against (f(x+eps) - f(x-eps)) / (2 eps) entry by entry.  It is the
independent oracle for every differentiable op and full forward path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list = field(default_factory=list)
    nonfinite: bool = False
    tol: float = 1e-3

    @property
    def passed(self) -> bool:
        return (not self.nonfinite) and self.max_rel_err <= self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        parts = ", ".join(f"{e:.3e}" for e in self.per_input)
        extra = " nonfinite!" if self.nonfinite else ""
        return f"grad_check {status}: max={self.max_rel_err:.3e} per-input=[{parts}]{extra}"


def _error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error for O(1) gradients, absolute for tiny ones."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f, inputs, eps: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued ``f`` with central differences.

    ``f`` takes a list of Tensors and returns a scalar Tensor (sum-reduced).
    Inputs are copied to float64 leaves, so callers can pass float32 data.
    Non-finite values anywhere in the sweep are flagged in the report.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside the supported [1e-4, 1e-2] range")
    leaves = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64), requires_grad=True)
              for t in inputs]
    out = f(leaves)
    nonfinite = not np.isfinite(out.data).all()
    out.backward()
    analytic = []
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        analytic.append(np.array(g, dtype=np.float64))
        if not np.isfinite(g).all():
            nonfinite = True

    def evaluate() -> float:
        fresh = [Tensor(leaf.data, requires_grad=False, dtype=np.float64) for leaf in leaves]
        val = f(fresh)
        return float(val.data)

    per_input = []
    for idx, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            step = eps * max(1.0, abs(keep))
            flat[i] = keep + step
            f_plus = evaluate()
            flat[i] = keep - step
            f_minus = evaluate()
            flat[i] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                nonfinite = True
            num[i] = (f_plus - f_minus) / (2.0 * step)
        per_input.append(_error(analytic[idx].reshape(-1), num))
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_err=max_err, per_input=per_input, nonfinite=nonfinite, tol=tol)
