"""Minimal reverse-mode autodiff over numpy arrays."""
from caml.autodiff import ops
from caml.autodiff.gradcheck import KERNELS, check_function, grad_check
from caml.autodiff.optim import OptimizerState, sgd_step, zero_grads
from caml.autodiff.tensor import Graph, Tensor, backward, current_graph, no_grad

__all__ = [
    "Graph",
    "KERNELS",
    "OptimizerState",
    "Tensor",
    "backward",
    "check_function",
    "current_graph",
    "grad_check",
    "no_grad",
    "ops",
    "sgd_step",
    "zero_grads",
]
