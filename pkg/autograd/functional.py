"""
Differentiable operations
Each op computes its forward value with numpy, validates shapes and
finiteness, and records a backward rule on the active tape.
"""
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from autograd.tensor import BackwardRule, Node, Tensor, check_finite, current_tape
from core.errors import ShapeError, VocabularyError
from core.models import Activation

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardRule) -> Tensor:
    check_finite(data, op)
    tape = current_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(data, requires_grad=requires_grad, name=op)
    if requires_grad:
        tape.record(Node(op=op, inputs=tuple(inputs), output=out, backward=backward))
    return out


def _require_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {x.shape}")


# ========== Linear algebra ==========

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    return _emit("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x (n, k) + bias (k,), broadcast over the leading axis only."""
    _require_2d(x, "add_bias")
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    return _emit("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return g * b.data, g * a.data

    return _emit("mul", a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice x[:, start:stop]."""
    _require_2d(x, "columns")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"column range [{start}, {stop}) outside width {x.shape[1]}")

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return _emit("columns", x.data[:, start:stop].copy(), (x,), backward)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    for part in parts:
        _require_2d(part, "concat_columns")
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_columns needs equal row counts")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: np.ndarray):
        return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

    return _emit("concat_columns", np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


# ========== Nonlinearities ==========

def activation(x: Tensor, kind: Activation) -> Tensor:
    z = x.data
    if kind == Activation.RELU:
        out = np.maximum(z, 0)
        local = (z > 0).astype(z.dtype)
    elif kind == Activation.GELU:
        cdf = 0.5 * (1.0 + erf(z / _SQRT_2))
        out = z * cdf
        local = cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    elif kind == Activation.SILU:
        sig = 1.0 / (1.0 + np.exp(-z))
        out = z * sig
        local = sig * (1.0 + z * (1.0 - sig))
    elif kind == Activation.IDENTITY:
        out = z.copy()
        local = np.ones_like(z)
    else:
        raise ValueError(f"unknown activation {kind}")
    out = out.astype(z.dtype, copy=False)
    local = local.astype(z.dtype, copy=False)
    return _emit(kind.value, out, (x,), lambda g: (g * local,))


def softmax(x: Tensor, allowed: Optional[np.ndarray] = None) -> Tensor:
    """
    Row softmax. `allowed` (same shape, bool) marks the entries that may
    receive probability; every row must allow at least one entry.
    """
    _require_2d(x, "softmax")
    z = x.data
    if allowed is not None:
        if allowed.shape != z.shape:
            raise ShapeError(f"softmax mask {allowed.shape} does not match {z.shape}")
        if not allowed.any(axis=1).all():
            raise ShapeError("softmax mask leaves a row empty")
        z = np.where(allowed, z, -np.inf)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = (e / e.sum(axis=1, keepdims=True)).astype(x.data.dtype, copy=False)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _require_2d(x, "layer_norm")
    width = x.shape[1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match width {width}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g: np.ndarray):
        dxhat = g * gamma.data
        dx = (inv / width) * (
            width * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ========== Embeddings and loss ==========

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    _require_2d(table, "embedding")
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be a 1-D integer array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(f"token id outside [0, {table.shape[0]})")

    def backward(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit("embedding", table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean negative log-likelihood over rows of `logits`."""
    _require_2d(logits, "cross_entropy")
    n, vocab = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,) or not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError(f"targets must be {n} integers")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise VocabularyError(f"target index outside [0, {vocab})")
    w = np.ones(n, dtype=logits.data.dtype) if weights is None else np.asarray(weights, dtype=logits.data.dtype)
    if w.shape != (n,):
        raise ShapeError(f"weights must have shape ({n},)")
    total = w.sum()
    if total <= 0:
        raise ShapeError("cross_entropy needs at least one weighted row")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -(w * log_probs[rows, targets]).sum() / total

    def backward(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)
