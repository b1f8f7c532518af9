from . import ops
from .gradcheck import GradcheckReport, gradcheck, numerical_grad
from .tensor import Tensor, as_tensor, get_default_dtype, is_grad_enabled, no_grad, set_default_dtype

__all__ = [
    "GradcheckReport",
    "Tensor",
    "as_tensor",
    "get_default_dtype",
    "gradcheck",
    "is_grad_enabled",
    "no_grad",
    "numerical_grad",
    "ops",
    "set_default_dtype",
]
