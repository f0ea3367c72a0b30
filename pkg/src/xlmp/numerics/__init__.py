from . import ops
from .gradcheck import GradCheckError, grad_check, relative_error
from .ops import EmptyPoolError, SimilarityError, UndefinedLossError
from .tensor import DEFAULT_DTYPE, DimensionError, Tape, TapeError, Tensor, emit

__all__ = [
    "DEFAULT_DTYPE",
    "DimensionError",
    "EmptyPoolError",
    "GradCheckError",
    "SimilarityError",
    "Tape",
    "TapeError",
    "Tensor",
    "UndefinedLossError",
    "emit",
    "grad_check",
    "ops",
    "relative_error",
]
