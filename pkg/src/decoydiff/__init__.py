"""Desk-scale diffusion inpainting sandbox with a cross-attention decoy
protection engine."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, backward, check_gradient, Adam  # noqa: F401
from .checkpoint import Checkpoint  # noqa: F401
