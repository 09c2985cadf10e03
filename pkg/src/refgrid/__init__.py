"""Referring-expression grounding on a synthetic shape corpus.

A small taped-autodiff engine (:mod:`refgrid.tensor`) powers a one-stage
grounding model: a strided conv backbone, a bidirectional GRU text encoder,
text-weighted multi-scale fusion, a collect/diffuse attention unit, and an
anchor-grid box head.  The ``refgrid`` CLI covers data generation, training,
evaluation, gradient checking, benchmarking, and visualization.
"""

from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
)

__all__ = [
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
]

__version__ = "0.1.0"
