"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, no_grad


@dataclass
class GradcheckFailure:
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    """Per-element comparison of analytic vs central-difference gradients.

    rel error = |analytic - numeric| / max(1, |numeric|); the report passes
    iff every element is within tol and no evaluation produced a non-finite
    value.
    """

    max_rel_error: float
    tol: float
    passed: bool
    nonfinite: bool
    failures: list[GradcheckFailure] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = " (non-finite values encountered)" if self.nonfinite else ""
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} vs tol {self.tol:.1e}{extra}"


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
) -> GradcheckReport:
    """Check df/dx of a scalar-valued graph builder against central differences.

    Only inputs with requires_grad are checked.  The numeric side perturbs
    each element in place and re-runs f under no_grad; the analytic side is
    one reverse pass.  Unreachable inputs raise (an argmax barrier in the
    differentiated path is an error, not a zero).
    """
    inputs = list(inputs)
    out = f(*inputs)
    if out.shape != ():
        raise ValueError(f"gradcheck: f must produce a scalar, got shape {out.shape}")
    checked = [t for t in inputs if t.requires_grad]
    analytic = grad(out, checked)

    nonfinite = not np.isfinite(out.data).all()
    max_rel = 0.0
    failures: list[GradcheckFailure] = []
    for input_index, (t, a) in enumerate(zip(checked, analytic)):
        if not np.isfinite(a.data).all():
            nonfinite = True
        flat = t.data.reshape(-1)
        a_flat = a.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                f_plus = float(f(*inputs).data)
                flat[j] = orig - h
                f_minus = float(f(*inputs).data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                nonfinite = True
                numeric = float("nan")
            else:
                numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(a_flat[j] - numeric) / max(1.0, abs(numeric))
            if not np.isfinite(rel):
                rel = float("inf")
            max_rel = max(max_rel, rel)
            if rel > tol:
                failures.append(GradcheckFailure(input_index, j, float(a_flat[j]), numeric, rel))

    passed = not nonfinite and max_rel <= tol
    return GradcheckReport(max_rel_error=max_rel, tol=tol, passed=passed,
                           nonfinite=nonfinite, failures=failures)
