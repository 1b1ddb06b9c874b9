"""Evaluation: border erosion, confusion matrices, accuracy and F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError

IGNORE_LABEL = 255


def disc_offsets(radius):
    """Integer offsets ``(dy, dx)`` with ``dy**2 + dx**2 <= radius**2``."""
    r = int(np.floor(radius))
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= radius * radius]


def boundary_pixels(gt, ignore_index=IGNORE_LABEL):
    """Pixels with an 8-neighbour holding a different (non-ignored) class."""
    h, w = gt.shape
    valid = gt != ignore_index
    padded = np.pad(gt, 1, mode="edge")
    pvalid = np.pad(valid, 1, mode="constant", constant_values=False)
    edge = np.zeros((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            nb_valid = pvalid[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            edge |= (nb != gt) & nb_valid
    return edge & valid


def erode_borders(gt, radius=3, ignore_index=IGNORE_LABEL):
    """Validity mask excluding pixels within ``radius`` of a class boundary.

    Distance is Euclidean, so radius 0 drops the boundary pixels only.
    Ignore-labelled pixels are always invalid.
    """
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise ShapeError(f"label plane must be 2-D, got {gt.shape}")
    if radius < 0:
        raise ArgumentError(f"erosion radius must be >= 0, got {radius}")
    valid = gt != ignore_index
    h, w = gt.shape
    edge = boundary_pixels(gt, ignore_index)
    near = np.zeros((h, w), dtype=bool)
    for dy, dx in disc_offsets(radius):
        # near[y, x] |= edge[y + dy, x + dx]
        ys, ye = max(0, -dy), min(h, h - dy)
        xs, xe = max(0, -dx), min(w, w - dx)
        if ye <= ys or xe <= xs:
            continue
        near[ys:ye, xs:xe] |= edge[ys + dy : ye + dy, xs + dx : xe + dx]
    return valid & ~near


def confusion(gt, pred, mask, n_classes):
    """``k x k`` counts over masked pixels; rows are truth, columns prediction."""
    gt, pred, mask = (np.asarray(a) for a in (gt, pred, mask))
    if not gt.shape == pred.shape == mask.shape:
        raise ShapeError(f"shapes differ: gt {gt.shape}, pred {pred.shape}, mask {mask.shape}")
    g = gt[mask].astype(np.int64)
    p = pred[mask].astype(np.int64)
    if g.size and (g.max() >= n_classes or p.max() >= n_classes or min(g.min(), p.min()) < 0):
        raise ArgumentError("label outside [0, n_classes) in evaluated pixels")
    return np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class Scores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    average_f1: float
    overall_accuracy: float
    total: int


def f1_scores(cm):
    """Per-class precision, recall, F1 plus average F1 and overall accuracy.

    Undefined ratios (no predicted or no true pixel) count as 0. The average
    F1 runs over classes present in the ground truth.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ArgumentError("metrics are undefined for an empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = actual > 0
    return Scores(precision, recall, f1, float(f1[present].mean()), float(tp.sum() / total), total)


def format_report(cm, class_names=None, machine_block=True):
    """Plain-text table of per-class metrics followed by key=value lines."""
    s = f1_scores(cm)
    k = len(s.f1)
    names = list(class_names) if class_names else [f"class_{i}" for i in range(k)]
    width = max(12, max(len(n) for n in names))
    lines = [f"{'class':<{width}}  precision  recall     f1", "-" * (width + 30)]
    for i in range(k):
        lines.append(f"{names[i]:<{width}}  {s.precision[i]:9.4f}  {s.recall[i]:6.4f}  {s.f1[i]:6.4f}")
    lines.append("-" * (width + 30))
    lines.append(f"average F1        {s.average_f1:.4f}")
    lines.append(f"overall accuracy  {s.overall_accuracy:.4f}")
    lines.append(f"valid pixels      {s.total}")
    if machine_block:
        lines.append("")
        lines.append(f"overall_accuracy={s.overall_accuracy:.6f}")
        lines.append(f"average_f1={s.average_f1:.6f}")
        lines.append(f"valid_pixels={s.total}")
        for i in range(k):
            lines.append(f"f1.{names[i]}={s.f1[i]:.6f}")
    return "\n".join(lines) + "\n"
