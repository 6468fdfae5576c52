"""Capsule-network speech emotion recognition with adversarial corpus adaptation."""

from .tensor import Tensor, Tape, backward, no_grad, ContractError, DimensionError

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "no_grad", "ContractError", "DimensionError", "__version__"]
