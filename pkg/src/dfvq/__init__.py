"""Defect-free vector-quantized image codec with text-guided latent
inpainting, built on a small deterministic numpy autodiff engine."""

from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .rng import Rng
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    record,
)

__all__ = [
    "Adam",
    "AdamState",
    "NumericError",
    "Rng",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "grad_check",
    "record",
]

__version__ = "0.1.0"
