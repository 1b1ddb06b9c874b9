"""Layer primitives with explicit forward/backward passes.

Every layer keeps whatever it needs from its last ``forward`` call in a
private cache; ``backward`` consumes that cache, returns the gradient with
respect to the layer input and *accumulates* parameter gradients into
``Parameter.grad``. There is no autograd graph: composite modules call
their children's backward methods in reverse order themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError, StateError, StatisticsError
from .tensor import DTYPE, Parameter, check_tensor4

BLOCK_ORDERS = ("conv-bn-relu", "conv-relu-bn")


class Module:
    """Minimal container protocol.

    Children and parameters are discovered from instance attributes in
    assignment order, which fixes the parameter order used by checkpoints.
    """

    training = True

    def _named_members(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield f"{prefix}{name}", value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{prefix}{name}.{i}", item

    def children(self):
        return [m for _, m in self._named_members() if isinstance(m, Module)]

    def named_parameters(self, prefix=""):
        out = []
        for path, item in self._named_members(prefix):
            if isinstance(item, Parameter):
                out.append((path, item))
            elif isinstance(item, Module):
                out.extend(item.named_parameters(path + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_trainable_parameters(self):
        return self.named_parameters()

    def trainable_parameters(self):
        return [p for _, p in self.named_trainable_parameters()]

    def named_buffers(self, prefix=""):
        """Non-learnable state that must persist (batch-norm running stats)."""
        out = []
        for path, item in self._named_members(prefix):
            if isinstance(item, Module):
                out.extend(item.named_buffers(path + "."))
        return out

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast all parameters and buffers in place (used by gradient checks)."""
        for p in self.parameters():
            p.astype(dtype)
        for child in self.children():
            child._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for child in self.children():
            child._cast_buffers(dtype)

    def name_parameters(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2D(Module):
    """2-D cross-correlation with optional bias, via im2col and one batched matmul."""

    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1, stride=1, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            _he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        )
        self.bias = Parameter(np.zeros(out_channels), decay=False) if bias else None
        self._x = None
        self._cols = None

    def output_hw(self, h, w):
        k, p, s = self.kernel_size, self.padding, self.stride
        if (h + 2 * p - k) % s or (w + 2 * p - k) % s or h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(
                f"conv k={k} pad={p} stride={s} does not tile a {h}x{w} input exactly"
            )
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _im2col(self, x, ho, wo):
        n, c, h, w = x.shape
        k, p, s = self.kernel_size, self.padding, self.stride
        if k == 1 and p == 0 and s == 1:
            return x.reshape(n, c, h * w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
        return cols.reshape(n, c * k * k, ho * wo)

    def forward(self, x):
        check_tensor4(x, "conv input")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {x.shape[1]}")
        n = x.shape[0]
        ho, wo = self.output_hw(x.shape[2], x.shape[3])
        cols = self._im2col(x, ho, wo)
        w2 = self.weight.value.reshape(self.out_channels, -1)
        y = np.matmul(w2, cols)
        if self.bias is not None:
            y += self.bias.value[None, :, None]
        self._x = x
        self._cols = cols
        return y.reshape(n, self.out_channels, ho, wo)

    def backward(self, dy):
        if self._x is None:
            raise StateError("Conv2D.backward called before forward")
        x = self._x
        n, c, h, w = x.shape
        k, p, s = self.kernel_size, self.padding, self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dy2 = dy.reshape(n, self.out_channels, ho * wo)
        cols = self._cols
        self.weight.grad += np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.weight.shape
        )
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=(0, 2))
        w2 = self.weight.value.reshape(self.out_channels, -1)
        dcols = np.matmul(w2.T, dy2)
        if k == 1 and p == 0 and s == 1:
            return dcols.reshape(x.shape)
        dcols = dcols.reshape(n, c, k, k, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def zero_init(self):
        self.weight.value[...] = 0
        if self.bias is not None:
            self.bias.value[...] = 0


class BatchNorm(Module):
    """Per-channel batch normalisation with running statistics.

    Running estimates follow ``new = (1 - momentum) * old + momentum * batch``
    using the biased batch variance.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self._cache = None

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def _cast_buffers(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x):
        check_tensor4(x, "batch-norm input")
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects {self.channels} channels, got {x.shape[1]}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if self.training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise StatisticsError("train-mode batch norm needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
            self.running_var[...] = (1 - mom) * self.running_var + mom * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, self.training)
        return xhat * g + b

    def backward(self, dy):
        if self._cache is None:
            raise StateError("BatchNorm.backward called before forward")
        xhat, inv_std, batch_stats = self._cache
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        scale = (self.gamma.value * inv_std)[None, :, None, None]
        if not batch_stats:
            return dy * scale
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        mean_dy = dy.sum(axis=(0, 2, 3), keepdims=True) / m
        mean_dy_xhat = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True) / m
        return scale * (dy - mean_dy - xhat * mean_dy_xhat)


class ReLU(Module):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy):
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        return np.where(self._mask, dy, dy.dtype.type(0))


@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions recorded by a 2x2 max-pool.

    ``flat`` has the pooled shape ``(n, c, h/2, w/2)``; each entry is the
    row-major offset ``row * w + col`` of the maximum inside its plane of the
    pre-pooled map, whose shape is ``input_shape``.
    """

    input_shape: tuple
    flat: np.ndarray

    @property
    def pooled_shape(self):
        return self.flat.shape


def max_pool2(x):
    """2x2/stride-2 max pooling. Returns ``(pooled, PoolIndices)``.

    Ties go to the first element of the window in row-major order.
    """
    check_tensor4(x, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h2)[:, None] + arg // 2
    cols = 2 * np.arange(w2)[None, :] + arg % 2
    return out, PoolIndices((n, c, h, w), rows * w + cols)


def _check_indices(y, idx):
    if tuple(y.shape) != tuple(idx.pooled_shape):
        raise ShapeError(f"values {y.shape} do not match pool indices {idx.pooled_shape}")


def max_unpool2(y, idx):
    """Place ``y`` at the recorded argmax positions of a zero map."""
    check_tensor4(y, "unpool input")
    _check_indices(y, idx)
    n, c, h, w = idx.input_shape
    out = np.zeros((n, c, h * w), dtype=y.dtype)
    np.put_along_axis(out, idx.flat.reshape(n, c, -1), y.reshape(n, c, -1), axis=2)
    return out.reshape(n, c, h, w)


def gather_indices(d, idx):
    """Adjoint of :func:`max_unpool2`: read ``d`` at the recorded positions."""
    n, c, h, w = idx.input_shape
    if tuple(d.shape) != (n, c, h, w):
        raise ShapeError(f"gradient {d.shape} does not match pooled input {idx.input_shape}")
    flat = np.take_along_axis(d.reshape(n, c, h * w), idx.flat.reshape(n, c, -1), axis=2)
    return flat.reshape(idx.pooled_shape)


class MaxPool2(Module):
    def __init__(self):
        self.indices = None

    def forward(self, x):
        out, self.indices = max_pool2(x)
        return out

    def backward(self, dy):
        if self.indices is None:
            raise StateError("MaxPool2.backward called before forward")
        return max_unpool2(dy, self.indices)


class MaxUnpool2(Module):
    def __init__(self):
        self._idx = None

    def forward(self, y, idx):
        out = max_unpool2(y, idx)
        self._idx = idx
        return out

    def backward(self, dy):
        if self._idx is None:
            raise StateError("MaxUnpool2.backward called before forward")
        return gather_indices(dy, self._idx)


def interpolation_matrix(n_in, n_out):
    """Corner-aligned linear interpolation weights, shape ``(n_out, n_in)``.

    Output sample ``o`` reads the input at ``o * (n_in - 1) / (n_out - 1)``;
    a single input sample is replicated.
    """
    a = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    t = src - i0
    rows = np.arange(n_out)
    a[rows, i0] = 1.0 - t
    a[rows, i0 + 1] += t
    return a


class BilinearUpsample(Module):
    """Separable bilinear upsampling by a power-of-two factor."""

    def __init__(self, factor):
        factor = int(factor)
        if factor < 2 or factor & (factor - 1):
            raise ArgumentError(f"upsampling factor must be a power of two >= 2, got {factor}")
        self.factor = factor
        self._mats = None

    def forward(self, x):
        check_tensor4(x, "upsample input")
        h, w = x.shape[2], x.shape[3]
        # float64 weights keep constant maps exactly constant after the cast back
        ah = interpolation_matrix(h, h * self.factor)
        aw = interpolation_matrix(w, w * self.factor)
        self._mats = (ah, aw)
        return np.matmul(np.matmul(ah, x.astype(np.float64)), aw.T).astype(x.dtype)

    def backward(self, dy):
        if self._mats is None:
            raise StateError("BilinearUpsample.backward called before forward")
        ah, aw = self._mats
        return np.matmul(np.matmul(ah.T, dy.astype(np.float64)), aw).astype(dy.dtype)


def bilinear_upsample(x, factor):
    return BilinearUpsample(factor).forward(x)


def channel_concat(xs):
    """Stack tensors along channels in argument order."""
    xs = list(xs)
    if not xs:
        raise ShapeError("channel_concat needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        check_tensor4(x, "concat input")
        if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concat {x.shape} with {ref}")
    if len(xs) == 1:
        return xs[0].copy()
    return np.concatenate(xs, axis=1)


def channel_split(x, sizes):
    """Inverse of :func:`channel_concat` given the channel counts."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    offsets = np.cumsum([0] + list(sizes))
    return [x[:, offsets[i] : offsets[i + 1]].copy() for i in range(len(sizes))]


class Concat(Module):
    def __init__(self):
        self._sizes = None

    def forward(self, *xs):
        out = channel_concat(xs)
        self._sizes = [x.shape[1] for x in xs]
        return out

    def backward(self, dy):
        if self._sizes is None:
            raise StateError("Concat.backward called before forward")
        return channel_split(dy, self._sizes)


class ConvBlock(Module):
    """A run of 3x3 convolutions, each followed by BN and ReLU.

    ``block_order`` selects ``conv-bn-relu`` (default) or ``conv-relu-bn``.
    """

    def __init__(self, in_channels, widths, block_order="conv-bn-relu", rng=None):
        if block_order not in BLOCK_ORDERS:
            raise ArgumentError(f"block_order must be one of {BLOCK_ORDERS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.block_order = block_order
        self.convs = []
        self.norms = []
        self.relus = []
        c = in_channels
        for width in widths:
            # BN straight after the conv cancels any bias, so it is omitted there
            self.convs.append(Conv2D(c, width, 3, 1, 1, rng=rng, bias=block_order != "conv-bn-relu"))
            self.norms.append(BatchNorm(width))
            self.relus.append(ReLU())
            c = width
        self.in_channels = in_channels
        self.out_channels = c

    def _stages(self, i):
        if self.block_order == "conv-bn-relu":
            return (self.convs[i], self.norms[i], self.relus[i])
        return (self.convs[i], self.relus[i], self.norms[i])

    def forward(self, x):
        for i in range(len(self.convs)):
            for layer in self._stages(i):
                x = layer.forward(x)
        return x

    def backward(self, dy):
        for i in reversed(range(len(self.convs))):
            for layer in reversed(self._stages(i)):
                dy = layer.backward(dy)
        return dy

    def zero_init(self):
        """Make the block output exactly zero (for residual branches)."""
        # A zero conv output is constant, so BN maps it to beta = 0 in either order.
        self.convs[-1].zero_init()
