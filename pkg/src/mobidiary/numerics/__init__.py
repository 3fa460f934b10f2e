from . import ops
from .gradcheck import check_params, finite_diff_check
from .ops import primitive_set
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    as_tensor,
    finite_checks,
    grad_enabled,
    no_grad,
    set_finite_check,
)

__all__ = [
    "AdamState",
    "NumericError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_params",
    "clip_grad_norm",
    "finite_checks",
    "finite_diff_check",
    "grad_enabled",
    "no_grad",
    "ops",
    "primitive_set",
    "set_finite_check",
]
