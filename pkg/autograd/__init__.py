# Autograd package
from .tensor import (
    Tensor, Tape, GradientMap, backward, current_tape,
    set_precision, get_precision, get_dtype, precision
)
from .gradcheck import grad_check, GradCheckReport
from . import functional

__all__ = [
    'Tensor', 'Tape', 'GradientMap', 'backward', 'current_tape',
    'set_precision', 'get_precision', 'get_dtype', 'precision',
    'grad_check', 'GradCheckReport', 'functional'
]
