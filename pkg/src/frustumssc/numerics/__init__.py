"""Tensor substrate: eager tape autodiff over numpy buffers."""

from . import ops
from .gradcheck import grad_check
from .tensor import (
    Graph,
    Tensor,
    active_graph,
    as_tensor,
    backward,
    clear_graph,
    default_dtype,
    is_grad_enabled,
    no_grad,
    set_debug_checks,
    set_default_dtype,
    using_dtype,
)

__all__ = [
    "Graph",
    "Tensor",
    "active_graph",
    "as_tensor",
    "backward",
    "clear_graph",
    "default_dtype",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "set_debug_checks",
    "set_default_dtype",
    "using_dtype",
]
