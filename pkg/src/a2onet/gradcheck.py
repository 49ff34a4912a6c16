"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import ParamSet
from .tensor import Tensor, no_grad

__all__ = ["grad_check", "GradCheckReport"]


@dataclass
class Failure:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    checked: int
    failures: list[Failure] = field(default_factory=list)

    def __str__(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        s = f"{head}: max rel err {self.max_rel_err:.3e} over {self.checked} coords"
        for f in self.failures[:20]:
            s += (f"\n  {f.name}{list(f.index)}: analytic {f.analytic:.6e} "
                  f"vs numeric {f.numeric:.6e} (rel {f.rel_err:.3e})")
        if len(self.failures) > 20:
            s += f"\n  ... {len(self.failures) - 20} more"
        return s


def grad_check(f: Callable[[], Tensor], params: ParamSet | dict,
               eps: float = 1e-5, tol: float = 1e-3,
               coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f()` against central
    finite differences, coordinate by coordinate.

    Relative error is |a - n| / max(|a|, |n|, 1e-8); the check passes iff
    the max over all checked coordinates is <= `tol`. Requires float64
    parameters (float32 cannot resolve the difference quotient at 1e-5).
    `coords_per_param` caps the number of randomly chosen coordinates
    checked per tensor; None checks all of them.
    """
    items = list(params.items())
    for name, t in items:
        if t.data.dtype != np.float64:
            raise ValueError(
                f"grad_check requires float64 parameters; {name!r} is {t.data.dtype}")
    rng = rng or np.random.default_rng(0)

    for _, t in items:
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in items}

    failures: list[Failure] = []
    max_rel = 0.0
    checked = 0
    for name, t in items:
        flat_idx = np.arange(t.data.size)
        if coords_per_param is not None and t.data.size > coords_per_param:
            flat_idx = np.sort(rng.choice(t.data.size, coords_per_param, replace=False))
        flat = t.data.reshape(-1)
        for i in flat_idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
            checked += 1
            if rel > tol:
                idx = np.unravel_index(i, t.data.shape)
                failures.append(Failure(name, idx, a, numeric, rel))

    return GradCheckReport(not failures, max_rel, checked, failures)
