"""The standard gradient-check suite run by ``mfn gradcheck``.

Covers every layer primitive, the loss, and width-reduced instances of each
model family. Large tensors are sampled (``max_per_tensor``) so the whole
suite stays within a couple of minutes on one core.
"""

from __future__ import annotations

import numpy as np

from .gradcheck import gradient_check
from .layers import (
    BatchNorm,
    BilinearUpsample,
    Concat,
    Conv2D,
    ConvBlock,
    MaxPool2,
    Module,
    ReLU,
    gather_indices,
    max_pool2,
    max_unpool2,
)
from .models import CorrectionNet, FuseNet, MultiScaleSegNet, ResidualCorrection, SegNet
from .training import LossConfig, cross_entropy_loss

REDUCED_WIDTHS = (8, 16, 16, 16, 16)


class _UnpoolProbe(Module):
    """Max-unpooling with indices fixed at construction."""

    def __init__(self, indices):
        self.indices = indices

    def forward(self, y):
        return max_unpool2(y, self.indices)

    def backward(self, dy):
        return gather_indices(dy, self.indices)


class _LossProbe(Module):
    """Cross-entropy as a module returning a 1x1x1x1 tensor."""

    def __init__(self, target, cfg):
        self.target = target
        self.cfg = cfg
        self._grad = None

    def forward(self, scores):
        loss, self._grad = cross_entropy_loss(scores, self.target, self.cfg)
        return np.full((1, 1, 1, 1), loss, dtype=scores.dtype)

    def backward(self, dy):
        return self._grad * dy.reshape(())


def _cases(seed):
    rng = np.random.default_rng(seed)

    def normal(*shape):
        return rng.standard_normal(shape)

    x_pool = normal(2, 3, 6, 6)
    _, idx = max_pool2(x_pool)
    target = rng.integers(0, 4, size=(2, 1, 4, 4))
    target[0, 0, 0, :2] = 255
    reduced = dict(n_classes=6, widths=REDUCED_WIDTHS, seed=seed)
    image = normal(1, 3, 32, 32)
    corr = CorrectionNet(5, 3, hidden=(4, 4), seed=seed)
    corr.convs[-1].weight.value[...] = 0.1 * normal(*corr.convs[-1].weight.value.shape)
    bases = [SegNet(3, modality="optical", **reduced), SegNet(3, modality="composite", **reduced)]
    rc = ResidualCorrection(bases, 6, hidden=(8, 8), seed=seed)
    rc.correction.convs[-1].weight.value[...] = 0.1 * normal(*rc.correction.convs[-1].weight.value.shape)

    yield "Conv2D 3x3", Conv2D(3, 4, 3, 1, rng=rng), (normal(2, 3, 5, 5),), None
    yield "Conv2D 3x3 stride 2", Conv2D(2, 3, 3, 1, stride=2, rng=rng), (normal(1, 2, 7, 7),), None
    yield "Conv2D 1x1", Conv2D(4, 2, 1, 0, rng=rng), (normal(2, 4, 3, 3),), None
    yield "BatchNorm", BatchNorm(3), (normal(2, 3, 4, 4),), None
    yield "ReLU", ReLU(), (normal(2, 3, 4, 4),), None
    yield "MaxPool2", MaxPool2(), (x_pool,), None
    yield "MaxUnpool2", _UnpoolProbe(idx), (normal(2, 3, 3, 3),), None
    yield "BilinearUpsample x2", BilinearUpsample(2), (normal(1, 2, 3, 4),), None
    yield "BilinearUpsample x8", BilinearUpsample(8), (normal(1, 1, 2, 3),), None
    yield "Concat", Concat(), (normal(1, 2, 3, 3), normal(1, 3, 3, 3)), None
    yield "ConvBlock conv-bn-relu", ConvBlock(2, [3, 3], "conv-bn-relu", rng=rng), (normal(2, 2, 4, 4),), None
    yield "ConvBlock conv-relu-bn", ConvBlock(2, [3], "conv-relu-bn", rng=rng), (normal(2, 2, 4, 4),), None
    weights = LossConfig(class_weights=np.array([0.5, 1.0, 2.0, 1.5]))
    yield "CrossEntropy weighted", _LossProbe(target, weights), (normal(2, 4, 4, 4),), None
    yield "CorrectionNet", corr, (normal(1, 5, 6, 6),), None
    yield "SegNet reduced", SegNet(3, **reduced), (image,), 12
    yield "MultiScaleSegNet reduced", MultiScaleSegNet(3, **reduced), (image,), 8
    yield "FuseNet sum reduced", FuseNet("sum", 3, 3, **reduced), (image, normal(1, 3, 32, 32)), 6
    yield "FuseNet virtual reduced", FuseNet("virtual", 3, 3, **reduced), (image, normal(1, 3, 32, 32)), 6
    yield "ResidualCorrection reduced", rc, (image, normal(1, 3, 32, 32)), 12


def run_gradient_suite(tolerance=1e-3, seed=0, log=None):
    """Run every check; returns the list of :class:`GradCheckReport`."""
    reports = []
    for label, module, inputs, limit in _cases(seed):
        module.train()
        report = gradient_check(module, inputs, tolerance=tolerance, max_per_tensor=limit, seed=seed, label=label)
        reports.append(report)
        if log is not None:
            for line in report.lines():
                log(line)
    return reports
