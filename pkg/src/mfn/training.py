"""Weighted cross-entropy, SGD with momentum, step schedule and epoch loop."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError, NumericError
from .models import IGNORE_LABEL


class EmptyLossWarning(UserWarning):
    """Every pixel of a batch carried the ignore label."""


def class_weights(histogram, clutter_index=None):
    """Inverse-frequency class weights normalised to a mean of 1.

    The mean is taken over non-clutter classes. The clutter class, when
    given, receives the smallest non-clutter weight. Classes that never
    occur get the largest computed weight.
    """
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ArgumentError("histogram must be a 1-D array of non-negative counts")
    if counts.sum() <= 0:
        raise ArgumentError("histogram is all zeros")
    freqs = counts / counts.sum()
    regular = np.ones(len(counts), dtype=bool)
    if clutter_index is not None:
        regular[clutter_index] = False
    present = regular & (freqs > 0)
    if not present.any():
        raise ArgumentError("no non-clutter class has a positive count")
    w = np.zeros(len(counts))
    w[present] = 1.0 / freqs[present]
    w[regular & ~present] = w[present].max()
    w[regular] /= w[regular].mean()
    if clutter_index is not None:
        w[clutter_index] = w[regular].min()
    return w


@dataclass
class LossConfig:
    class_weights: np.ndarray | None = None
    ignore_index: int | None = IGNORE_LABEL

    def __post_init__(self):
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ArgumentError("class weights must be finite and positive")
            self.class_weights = w


def cross_entropy_loss(scores, target, cfg=None):
    """Weighted multinomial logistic loss averaged over valid pixels.

    ``loss = -(1/N) * sum_i w[y_i] * log softmax(z_i)[y_i]`` where ``N``
    counts non-ignored pixels. Returns ``(loss, dscores)``; the gradient is
    ``w[y] * (softmax - onehot) / N``.
    """
    cfg = cfg or LossConfig()
    n, k, h, w = scores.shape
    if target.shape != (n, 1, h, w):
        raise DataError(f"target shape {target.shape} does not match scores {scores.shape}")
    labels = target[:, 0].astype(np.int64)
    valid = np.ones(labels.shape, dtype=bool)
    if cfg.ignore_index is not None:
        valid = labels != cfg.ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise DataError(f"labels outside [0, {k}) found: {np.unique(labels[bad])[:5]}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("all pixels ignored; loss is 0", EmptyLossWarning, stacklevel=2)
        return 0.0, np.zeros_like(scores)
    safe = np.where(valid, labels, 0)
    z = scores.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    log_p = picked - log_norm
    if cfg.class_weights is None:
        pix_w = valid.astype(np.float64)
    else:
        if len(cfg.class_weights) != k:
            raise DataError(f"{len(cfg.class_weights)} class weights for {k} classes")
        pix_w = np.where(valid, cfg.class_weights[safe], 0.0)
    loss = float(-(pix_w * log_p).sum() / n_valid)
    probs = np.exp(z - log_norm[:, None])
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (probs - onehot) * (pix_w / n_valid)[:, None]
    return loss, grad.astype(scores.dtype)


class Criterion:
    """Callable ``(scores, target) -> (loss, dscores)`` bound to a config."""

    def __init__(self, cfg=None):
        self.cfg = cfg or LossConfig()

    def __call__(self, scores, target):
        return cross_entropy_loss(scores, target, self.cfg)


@dataclass
class SGDConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    milestones: tuple = (5, 10, 15)
    gamma: float = 0.1


def lr_at_epoch(epoch, cfg=None):
    """Learning rate for a 0-based epoch: divided by 10 at each milestone reached."""
    cfg = cfg or SGDConfig()
    if epoch < 0:
        raise ArgumentError("epoch must be >= 0")
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.base_lr * cfg.gamma**passed


def sgd_step(params, lr, cfg=None):
    """Momentum SGD update, then zero the gradients.

    ``g = grad + wd * value`` (decay only where ``param.decay``),
    ``v = momentum * v + g``, ``value -= lr * lr_multiplier * v``.
    """
    cfg = cfg or SGDConfig()
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    for p in params:
        g = p.grad
        if p.decay and cfg.weight_decay:
            g = g + p.value.dtype.type(cfg.weight_decay) * p.value
        p.velocity *= p.value.dtype.type(cfg.momentum)
        p.velocity += g
        p.value -= p.value.dtype.type(lr * p.lr_multiplier) * p.velocity
        p.grad[...] = 0


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    pixel_accuracy: float


def iterate_batches(samples, batch_size, rng):
    """Shuffle ``samples`` with ``rng`` and yield stacked batches.

    Each sample is ``(inputs_tuple, target)`` with per-sample arrays of
    shape ``(c, h, w)`` and ``(1, h, w)``.
    """
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        n_inputs = len(chunk[0][0])
        inputs = tuple(np.stack([s[0][j] for s in chunk]) for j in range(n_inputs))
        target = np.stack([s[1] for s in chunk])
        yield inputs, target


def train_epoch(model, samples, criterion, cfg, epoch, rng):
    """One pass over ``samples`` in shuffled mini-batches.

    Returns running mean loss and pixel accuracy (ignored pixels excluded).
    """
    if len(samples) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    model.train()
    lr = lr_at_epoch(epoch, cfg)
    params = model.trainable_parameters()
    losses, correct, counted = [], 0, 0
    for inputs, target in iterate_batches(samples, cfg.batch_size, rng):
        loss, scores = model.forward_train(inputs, target, criterion)
        sgd_step(params, lr, cfg)
        losses.append(loss)
        pred = scores.argmax(axis=1)
        valid = target[:, 0] != IGNORE_LABEL
        correct += int((pred[valid] == target[:, 0][valid]).sum())
        counted += int(valid.sum())
    return EpochStats(epoch, lr, float(np.mean(losses)), correct / max(counted, 1))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)


def fit(model, samples, epochs, cfg=None, criterion=None, seed=0, log=None):
    """Train for ``epochs`` epochs; ``log`` receives one line per epoch."""
    cfg = cfg or SGDConfig()
    criterion = criterion or Criterion()
    rng = np.random.default_rng(seed)
    result = TrainResult()
    for epoch in range(epochs):
        stats = train_epoch(model, samples, criterion, cfg, epoch, rng)
        result.history.append(stats)
        if log is not None:
            log(format_log_line(stats))
    return result


def format_log_line(stats):
    return f"{stats.epoch}\t{stats.lr:g}\t{stats.mean_loss:.4f}\t{stats.pixel_accuracy:.3f}"
