"""
Tensor + Tape
Dense arrays with an explicit operation tape for reverse-mode differentiation.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import NonFiniteError, TapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision = "float32"
_tapes: List["Tape"] = []


def set_precision(name: str) -> None:
    """Global run precision. Recorded in every manifest."""
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """
    Row-major array plus an optional gradient accumulator.

    The gradient is absent (None) until a backward pass reaches the tensor;
    `grad_or_zeros` reads an unreached tensor as zero.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        array = np.array(data, dtype=get_dtype())
        check_finite(array, f"tensor {name or '<unnamed>'}")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def wrap(cls, data: np.ndarray, requires_grad: bool = False, name: str = "") -> "Tensor":
        """Adopt an already-validated array without copying."""
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = name
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data.copy(), requires_grad=False, name=self.name)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from autograd.functional import matmul
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        from autograd.functional import add
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from autograd.functional import mul
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.name or '-'}, shape={self.shape}{flag})"


BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


GradientMap = Dict[Tensor, np.ndarray]


@dataclass
class Tape:
    """
    Ordered record of executed operations. Recording order is topological
    by construction; one tape serves exactly one backward pass.
    """

    nodes: List[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> GradientMap:
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss is not connected to any trainable tensor")

        seen: Dict[int, Tensor] = {id(loss): loss}
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                seen[key] = tensor
                pending[key] = pending[key] + grad if key in pending else grad

        # whatever is left was never produced on this tape: the leaves
        gradients: GradientMap = {}
        for key, grad in pending.items():
            leaf = seen[key]
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad
            gradients[leaf] = leaf.grad

        logger.debug(f"backward over {len(self.nodes)} ops reached {len(gradients)} leaves")
        self.consumed = True
        self.nodes.clear()
        return gradients


def current_tape() -> Optional[Tape]:
    return _tapes[-1] if _tapes else None


def backward(loss: Tensor, tape: Optional[Tape] = None) -> GradientMap:
    """Backpropagate `loss` through `tape` (default: the innermost active tape)."""
    tape = tape or current_tape()
    if tape is None:
        raise TapeError("no tape recorded this loss")
    return tape.backward(loss)
