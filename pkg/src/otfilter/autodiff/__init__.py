"""Reverse-mode gradients, network parameterizations and Adam."""

from .adam import AdamState, adam_update
from .engine import Tensor, grad, no_grad
from .nets import (
    MapNet,
    ParamVector,
    PotentialNet,
    QuadraticPotential,
    eval_map,
    eval_potential,
    grad_u,
    laplacian_u,
)


def backprop(loss, params):
    """Gradient of a scalar graph node with respect to a flat parameter leaf.

    ``params`` is the :class:`Tensor` leaf the loss was built from; the
    result is a plain array of the same length.
    """
    return grad(loss, params).data


__all__ = [
    "AdamState",
    "MapNet",
    "ParamVector",
    "PotentialNet",
    "QuadraticPotential",
    "Tensor",
    "adam_update",
    "backprop",
    "eval_map",
    "eval_potential",
    "grad",
    "grad_u",
    "laplacian_u",
    "no_grad",
]
