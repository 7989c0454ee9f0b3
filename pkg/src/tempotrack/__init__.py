"""Desk-scale point tracking: frozen per-frame backbone, trainable temporal
adapters, and a non-parametric correlation + soft-argmax tracking head."""

from .tensor import Tensor, param, no_grad, fresh_graph, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "param", "no_grad", "fresh_graph", "grad_check", "__version__"]
