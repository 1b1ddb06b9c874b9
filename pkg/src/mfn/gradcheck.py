"""Central finite-difference verification of analytic backward passes."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class CheckEntry:
    name: str
    max_error: float
    checked: int
    kinks: int = 0


@dataclass
class GradCheckReport:
    label: str
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def max_error(self):
        return max((e.max_error for e in self.entries), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        out = [f"{status} {self.label}: max relative error {self.max_error:.3e} (tol {self.tolerance:.1e})"]
        for e in self.entries:
            kinks = f", {e.kinks} at kinks" if e.kinks else ""
            out.append(f"    {e.name:<40s} {e.max_error:.3e}  ({e.checked} elements{kinks})")
        return out


def relative_error(analytic, numeric, floor=1e-4):
    """Per-element ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _pick(size, limit, rng):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def _probe(flat, k, expected, step, base, objective, tolerance, floor):
    """Relative error of one element; shrinks the step across kinks.

    A probe whose perturbation flips a ReLU or max-pool switch somewhere
    downstream picks up part of the slope jump. Unless the first estimate is
    well inside the tolerance, the step is cut tenfold (twice at most) and
    the best estimate is kept. If every central difference misses and the
    one-sided slopes disagree, the one-sided slope closest to the analytic
    value is used. Returns ``(error, kinked)``.
    """
    orig = flat[k]
    best, best_h, one_sided = np.inf, step, np.inf
    for h in (step, step / 10, step / 100):
        flat[k] = orig + h
        up = objective()
        flat[k] = orig - h
        down = objective()
        flat[k] = orig
        err = float(relative_error(expected, (up - down) / (2 * h), floor))
        if err < best:
            best, best_h = err, h
        if best < 0.1 * tolerance:
            break
        forward, backward = (up - base) / h, (base - down) / h
        if relative_error(forward, backward, floor) >= tolerance:
            one_sided = min(one_sided, relative_error(expected, forward, floor), relative_error(expected, backward, floor))
    if best < tolerance:
        return best, best_h != step
    return float(min(best, one_sided)), True


def gradient_check(
    module,
    inputs,
    tolerance=1e-3,
    step=1e-5,
    floor=1e-4,
    max_per_tensor=None,
    seed=0,
    dtype=np.float64,
    label=None,
):
    """Compare a module's analytic gradients against central differences.

    The scalar probed is ``sum(G * module.forward(*inputs))`` for a fixed
    random ``G``, accumulated in float64. The module is deep-copied and cast
    to ``dtype`` first, so the caller's instance is untouched. The step must
    stay small enough not to push activations across ReLU or max-pool kinks,
    which in practice means float64. Every trainable parameter tensor and
    every input with a returned gradient is checked; ``max_per_tensor`` limits
    the number of sampled elements per tensor for large models.

    Elements whose probe had to dodge a kink are counted under ``kinks``.
    """
    if not isinstance(inputs, (list, tuple)):
        inputs = (inputs,)
    module = copy.deepcopy(module)
    if hasattr(module, "astype"):
        module.astype(dtype)
    xs = [np.array(x, dtype=dtype) for x in inputs]
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise NumericError("gradient_check input contains non-finite values")
    rng = np.random.default_rng(seed)

    def objective():
        out = module.forward(*xs)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite forward output during gradient check")
        return float(np.sum(out.astype(np.float64) * probe))

    out = module.forward(*xs)
    probe = rng.standard_normal(out.shape)
    params = module.trainable_parameters() if hasattr(module, "parameters") else []
    for p in params:
        p.zero_grad()
    dxs = module.backward(probe.astype(dtype))
    if not isinstance(dxs, (list, tuple)):
        dxs = [dxs]

    targets = []
    named = module.named_trainable_parameters() if hasattr(module, "parameters") else []
    for name, p in named:
        targets.append((name, p.value, p.grad.copy()))
    for i, (x, dx) in enumerate(zip(xs, dxs)):
        if dx is None:
            continue
        targets.append((f"input[{i}]", x, np.asarray(dx).copy()))

    base = objective()
    report = GradCheckReport(label or type(module).__name__, tolerance)
    for name, arr, analytic in targets:
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        flat = arr.reshape(-1)
        picks = _pick(flat.size, max_per_tensor, rng)
        expected = analytic.reshape(-1)[picks]
        errors = np.empty(len(picks))
        kinks = 0
        for j, k in enumerate(picks):
            errors[j], kinked = _probe(flat, k, expected[j], step, base, objective, tolerance, floor)
            kinks += kinked
        report.entries.append(CheckEntry(name, float(errors.max(initial=0.0)), len(picks), kinks))
    return report
