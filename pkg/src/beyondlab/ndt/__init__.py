"""Small numpy autodiff engine: eager primitives recorded on a tape."""

from . import ops
from .functional import (
    DegenerateEmbedding,
    GradCheckReport,
    cosine_similarity,
    evaluate,
    gradient_check,
    row_cosine,
    row_cosine_np,
)
from .tensor import (
    Gradients,
    NonFiniteError,
    Record,
    ShapeError,
    Tape,
    Tensor,
    backward,
    jvp,
    no_record,
)

__all__ = [
    "DegenerateEmbedding",
    "GradCheckReport",
    "Gradients",
    "NonFiniteError",
    "Record",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "cosine_similarity",
    "evaluate",
    "gradient_check",
    "jvp",
    "no_record",
    "ops",
    "row_cosine",
    "row_cosine_np",
]
