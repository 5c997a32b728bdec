"""Reverse-mode automatic differentiation over float64 tensors."""

from . import ops
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    AutodiffError,
    Graph,
    ShapeMismatchError,
    SingularMatrixError,
    TaintError,
    Tensor,
    UnreachableGradientError,
    ancestors,
    as_tensor,
    assert_untainted,
    grad,
    no_grad,
)

__all__ = [
    "AutodiffError",
    "Graph",
    "GradcheckReport",
    "ShapeMismatchError",
    "SingularMatrixError",
    "TaintError",
    "Tensor",
    "UnreachableGradientError",
    "ancestors",
    "as_tensor",
    "assert_untainted",
    "grad",
    "gradcheck",
    "no_grad",
    "ops",
]
