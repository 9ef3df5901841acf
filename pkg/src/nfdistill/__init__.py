"""Conditional flow vocoder lab: teacher flows, distilled students, fusion, metrics."""

from .tensor import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    TensorError,
    backward,
    parameter,
)

__all__ = [
    "GradTape",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "TensorError",
    "backward",
    "parameter",
]

__version__ = "0.1.0"
