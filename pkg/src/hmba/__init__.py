"""Hierarchical bidirectional Mamba video adapter, desk-scale and self-verifying."""

from hmba.tensor import (
    Tensor, ShapeMismatchError, NonFiniteError, GradError,
    no_grad, count_multiply_adds, backward, finite_diff_check,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeMismatchError", "NonFiniteError", "GradError",
    "no_grad", "count_multiply_adds", "backward", "finite_diff_check",
    "__version__",
]
