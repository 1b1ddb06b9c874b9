"""Dense 4-D float32 tensors and learnable parameters.

Activations and gradients are plain ``numpy.ndarray`` objects of shape
``(n, c, h, w)`` and dtype float32, C-ordered (w fastest, then h, then
channel, then batch item). The helpers here validate that contract; the
layers operate on the arrays directly.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, ShapeError

DTYPE = np.float32

# Hard cap on element count so a typo in a config cannot request terabytes.
_MAX_ELEMENTS = 2**40


def tensor_new(dims, fill=0.0, dtype=DTYPE):
    """Return a tensor of shape ``dims`` with every element equal to ``fill``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise DimensionError(f"expected 4 dims, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise DimensionError(f"all dims must be >= 1, got {dims}")
    total = 1
    for d in dims:
        total *= d
        if total > _MAX_ELEMENTS:
            raise DimensionError(f"dims {dims} overflow the element limit")
    return np.full(dims, fill, dtype=dtype)


def check_tensor4(x, name="tensor"):
    """Validate that ``x`` is a non-degenerate 4-D array and return it."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name} must be a 4-D array, got shape {shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"{name} has a zero dimension: {x.shape}")
    return x


def _require_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _apply(a, b, op):
    if op == "scale":
        return a * a.dtype.type(b)
    check_tensor4(b, "b")
    _require_same_shape(a, b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "average":
        return (a + b) * a.dtype.type(0.5)
    raise ValueError(f"unknown elementwise op {op!r}")


def elementwise(a, b, op):
    """Elementwise arithmetic on two tensors of identical shape.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``average`` or ``scale``; for
    ``scale`` the second operand is a Python scalar.
    """
    check_tensor4(a, "a")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _apply(a, b, op)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"elementwise {op} produced non-finite values")
    return out


def argmax_channel(t):
    """Per-pixel index of the largest channel, shape ``(n, 1, h, w)``.

    Ties resolve to the lowest channel index (numpy's first-occurrence rule).
    """
    check_tensor4(t)
    return np.argmax(t, axis=1)[:, None].astype(np.int64)


def softmax_channels(scores):
    """Numerically stable softmax over the channel axis."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Parameter:
    """A learnable tensor together with its gradient and momentum buffers.

    ``lr_multiplier`` scales the learning rate applied to this tensor only;
    it is how weights that start from a previous training run are given a
    slower rate than freshly initialised ones. ``decay`` marks whether SGD
    weight decay applies (off for biases and batch-norm affine terms).
    """

    def __init__(self, value, name="", lr_multiplier=1.0, decay=True):
        if lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)
        self.name = name
        self.lr_multiplier = float(lr_multiplier)
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.velocity = self.velocity.astype(dtype)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, lr_mult={self.lr_multiplier})"
