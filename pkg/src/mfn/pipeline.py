"""Tile packs on disk and the train / predict / evaluate workflows.

A tile pack is a directory holding MRT files plus ``manifest.txt``::

    # comment
    seed = 7
    size = 256
    tile = <stem> <optical.mrt> <composite.mrt> <label.mrt>

one ``tile`` line per scene, in index order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data.patches import extract_patches, predict_tile
from .data.raster import IGNORE, RasterTile, Role, composite_input, optical_input, read_mrt, write_mrt
from .data.synth import CLASS_NAMES, synth_scene
from .errors import CheckpointError, ConfigError, DataError
from .metrics import confusion, erode_borders, format_report
from .models import FuseNet, MultiScaleSegNet, ResidualCorrection, SegNet
from .training import Criterion, LossConfig, SGDConfig, class_weights, fit

MANIFEST = "manifest.txt"

# white roads, blue buildings, cyan low vegetation, green trees, yellow cars, red clutter
PALETTE = np.array(
    [[255, 255, 255], [0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class TileRecord:
    stem: str
    optical: str
    composite: str
    label: str


def write_synth_pack(out_dir, n_tiles, size, seed):
    """Generate ``n_tiles`` synthetic scenes as MRT files plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# synthetic tile pack", f"seed = {seed}", f"size = {size}"]
    records = []
    for i in range(n_tiles):
        optical, composite, label = synth_scene(np.random.SeedSequence([seed, i]), size)
        stem = f"tile_{i:03d}"
        rec = TileRecord(stem, f"{stem}_optical.mrt", f"{stem}_composite.mrt", f"{stem}_label.mrt")
        write_mrt(os.path.join(out_dir, rec.optical), optical)
        write_mrt(os.path.join(out_dir, rec.composite), composite)
        write_mrt(os.path.join(out_dir, rec.label), label)
        lines.append(f"tile = {rec.stem} {rec.optical} {rec.composite} {rec.label}")
        records.append(rec)
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return records


def read_manifest(tiles_dir):
    path = os.path.join(tiles_dir, MANIFEST)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read tile manifest {path}: {exc}") from None
    records = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line.startswith("tile"):
            continue
        key, _, value = line.partition("=")
        if key.strip() != "tile":
            continue
        parts = value.split()
        if len(parts) != 4:
            raise DataError(f"malformed manifest line: {line!r}")
        records.append(TileRecord(*parts))
    if not records:
        raise DataError(f"manifest {path} lists no tiles")
    return records


def load_tile(tiles_dir, record):
    """Return ``({"optical": x, "composite": x}, labels)`` for one record."""
    optical = read_mrt(os.path.join(tiles_dir, record.optical))
    composite = read_mrt(os.path.join(tiles_dir, record.composite))
    labels = read_mrt(os.path.join(tiles_dir, record.label)).plane(Role.LABEL)
    inputs = {"optical": optical_input(optical), "composite": composite_input(composite)}
    for name, x in inputs.items():
        if x.shape[1:] != labels.shape:
            raise DataError(f"{record.stem}: {name} {x.shape[1:]} does not match labels {labels.shape}")
    return inputs, labels


def fold_split(n_tiles, fold):
    """Tile ``i`` validates fold ``i % 3``; ``fold=None`` trains on all."""
    idx = list(range(n_tiles))
    if fold is None:
        return idx, []
    return [i for i in idx if i % 3 != fold], [i for i in idx if i % 3 == fold]


def model_inputs(model, inputs):
    return tuple(inputs[name] for name in model.inputs)


def build_from_config(cfg):
    common = dict(n_classes=cfg.k, width_scale=cfg.width_scale, block_order=cfg.block_order, seed=cfg.seed)
    if cfg.architecture == "segnet":
        model = SegNet(3, modality=cfg.modality, **common)
    elif cfg.architecture == "segnet_ms":
        model = MultiScaleSegNet(3, modality=cfg.modality, branches=cfg.branches, **common)
    elif cfg.architecture in ("fusenet_sum", "fusenet_virtual"):
        model = FuseNet(cfg.architecture.split("_")[1], 3, 3, **common)
    else:
        if len(cfg.base_checkpoints) < 1:
            raise ConfigError("residual_correction needs base_checkpoints")
        for path in cfg.base_checkpoints:
            if not os.path.exists(path):
                raise ConfigError(f"base checkpoint {path} does not exist")
        bases = [load_checkpoint(p) for p in cfg.base_checkpoints]
        model = ResidualCorrection(bases, cfg.k, seed=cfg.seed)
    if cfg.encoder_lr_multiplier != 1.0 and hasattr(model, "set_encoder_lr_multiplier"):
        model.set_encoder_lr_multiplier(cfg.encoder_lr_multiplier)
    return model


def label_histogram(label_planes, k):
    hist = np.zeros(k, dtype=np.int64)
    for lab in label_planes:
        valid = lab[lab != IGNORE]
        hist += np.bincount(valid.ravel(), minlength=k)[:k]
    return hist


def train_model(model, tiles, cfg, log=None):
    """Fit ``model`` on ``[(inputs_dict, labels), ...]`` following ``cfg``."""
    pairs = [(model_inputs(model, inputs), labels) for inputs, labels in tiles]
    samples = extract_patches(pairs, cfg.patch_size, cfg.train_stride, cfg.seed)
    weights = None
    if cfg.class_balance:
        weights = class_weights(label_histogram([lab for _, lab in tiles], cfg.k), cfg.clutter_index)
    sgd = SGDConfig(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.milestones)
    return fit(model, samples, cfg.epochs, sgd, Criterion(LossConfig(weights)), cfg.seed, log)


def cmd_synth(cfg):
    if cfg.tile_size % 32:
        raise ConfigError(f"tile_size must be divisible by 32, got {cfg.tile_size}")
    return write_synth_pack(cfg.tiles_dir, cfg.n_tiles, cfg.tile_size, cfg.seed)


def cmd_train(cfg):
    records = read_manifest(cfg.tiles_dir)
    model = build_from_config(cfg)
    train_idx, _ = fold_split(len(records), cfg.fold)
    tiles = [load_tile(cfg.tiles_dir, records[i]) for i in train_idx]
    log_dir = os.path.dirname(cfg.log)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
    with open(cfg.log, "w", encoding="utf-8") as log:
        result = train_model(model, tiles, cfg, log=lambda line: (log.write(line + "\n"), log.flush()))
    ckpt_dir = os.path.dirname(cfg.checkpoint)
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(cfg.checkpoint, model)
    return model, result


def colorize(labels):
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    known = labels < len(PALETTE)
    rgb[known] = PALETTE[labels[known]]
    return rgb


def write_preview(path, labels):
    from PIL import Image

    Image.fromarray(colorize(labels), mode="RGB").save(path, format="PNG")


def cmd_predict(cfg):
    """Sliding-window inference for the evaluation tiles of ``cfg``.

    Writes ``<stem>_pred.mrt`` (labels), ``<stem>_prob.mrt`` (stitched
    probabilities) and ``<stem>_pred.png`` (colour preview) per tile.
    """
    model = load_checkpoint(cfg.checkpoint)
    arch = model.manifest()["architecture"]
    if arch != cfg.architecture:
        raise CheckpointError(f"checkpoint holds {arch}, config asks for {cfg.architecture}")
    records = read_manifest(cfg.tiles_dir)
    train_idx, val_idx = fold_split(len(records), cfg.fold)
    os.makedirs(cfg.predictions_dir, exist_ok=True)
    outputs = []
    for i in val_idx or train_idx:
        inputs, _ = load_tile(cfg.tiles_dir, records[i])
        probs = predict_tile(model, model_inputs(model, inputs), cfg.patch_size, cfg.test_stride)
        labels = probs.argmax(axis=0).astype(np.uint8)
        stem = os.path.join(cfg.predictions_dir, records[i].stem)
        write_mrt(stem + "_pred.mrt", RasterTile.from_label(labels))
        prob_tile = RasterTile(labels.shape[0], labels.shape[1])
        for plane in probs:
            prob_tile.add(Role.SCORE, plane)
        write_mrt(stem + "_prob.mrt", prob_tile)
        write_preview(stem + "_pred.png", labels)
        outputs.append(stem + "_pred.mrt")
    return outputs


def class_names(k):
    return CLASS_NAMES if k == len(CLASS_NAMES) else tuple(f"class_{i}" for i in range(k))


def evaluate_tiles(pairs, k, radius=3):
    """Summed confusion matrix over ``[(gt, pred), ...]`` label planes."""
    cm = np.zeros((k, k), dtype=np.int64)
    for gt, pred in pairs:
        if gt.shape != pred.shape:
            raise DataError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
        cm += confusion(gt, pred, erode_borders(gt, radius), k)
    return cm


def cmd_evaluate(cfg):
    records = read_manifest(cfg.tiles_dir)
    train_idx, val_idx = fold_split(len(records), cfg.fold)
    pairs = []
    for i in val_idx or train_idx:
        rec = records[i]
        gt = read_mrt(os.path.join(cfg.tiles_dir, rec.label)).plane(Role.LABEL)
        pred_path = os.path.join(cfg.predictions_dir, rec.stem + "_pred.mrt")
        if not os.path.exists(pred_path):
            raise DataError(f"missing prediction {pred_path}")
        pairs.append((gt, read_mrt(pred_path).plane(Role.LABEL)))
    cm = evaluate_tiles(pairs, cfg.k, cfg.erosion_radius)
    report = format_report(cm, class_names(cfg.k))
    report_dir = os.path.dirname(cfg.report)
    if report_dir:
        os.makedirs(report_dir, exist_ok=True)
    with open(cfg.report, "w", encoding="utf-8") as f:
        f.write(report)
    return report, cm
