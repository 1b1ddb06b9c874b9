"""SegNet and its multi-scale, early-fusion and late-fusion variants.

All models share one calling convention:

* ``forward(*inputs)`` returns class scores ``(n, k, h, w)``;
* ``backward(dscores)`` propagates a score gradient and accumulates
  parameter gradients;
* ``forward_train(inputs, target, criterion)`` runs forward, loss and
  backward in one go and returns ``(loss, scores)``. ``criterion`` maps
  ``(scores, target)`` to ``(loss, dscores)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError
from .layers import (
    BilinearUpsample,
    Concat,
    Conv2D,
    ConvBlock,
    MaxPool2,
    MaxUnpool2,
    Module,
    ReLU,
)
from .tensor import softmax_channels

VGG_WIDTHS = (64, 128, 256, 512, 512)
ENCODER_DEPTHS = (2, 2, 3, 3, 3)
BRANCH_FACTORS = (2, 4, 8)
# decoder block (0-based) whose output feeds the branch of each downscale factor
BRANCH_BLOCK = {2: 3, 4: 2, 8: 1}
IGNORE_LABEL = 255


def scaled_widths(width_scale=1.0):
    return tuple(max(1, int(round(w * width_scale))) for w in VGG_WIDTHS)


def decoder_plan(widths):
    """Per-block conv widths of the decoder, mirroring the encoder."""
    w1, w2, w3, w4, w5 = widths
    return [[w5, w5, w4], [w4, w4, w3], [w3, w3, w2], [w2, w1], [w1]]


def _check_divisible(x):
    h, w = x.shape[2], x.shape[3]
    if h % 32 or w % 32:
        raise ShapeError(f"spatial dims must be divisible by 32, got {h}x{w}")


class Encoder(Module):
    def __init__(self, in_channels, widths, block_order="conv-bn-relu", rng=None):
        self.blocks = []
        self.pools = []
        c = in_channels
        for depth, w in zip(ENCODER_DEPTHS, widths):
            self.blocks.append(ConvBlock(c, [w] * depth, block_order, rng))
            self.pools.append(MaxPool2())
            c = w

    def forward(self, x):
        indices = []
        for block, pool in zip(self.blocks, self.pools):
            x = pool.forward(block.forward(x))
            indices.append(pool.indices)
        return x, indices

    def backward(self, dy):
        for block, pool in zip(reversed(self.blocks), reversed(self.pools)):
            dy = block.backward(pool.backward(dy))
        return dy


class Decoder(Module):
    """Unpool-then-convolve decoder ending in a 3x3 classifier."""

    def __init__(self, widths, n_classes, block_order="conv-bn-relu", rng=None):
        self.blocks = []
        self.unpools = []
        c = widths[-1]
        for plan in decoder_plan(widths):
            self.blocks.append(ConvBlock(c, plan, block_order, rng))
            self.unpools.append(MaxUnpool2())
            c = plan[-1]
        self.classifier = Conv2D(c, n_classes, 3, 1, rng=rng)
        self.block_outputs = []

    def forward(self, x, indices):
        self.block_outputs = []
        for b, (block, unpool) in enumerate(zip(self.blocks, self.unpools)):
            x = block.forward(unpool.forward(x, indices[len(indices) - 1 - b]))
            self.block_outputs.append(x)
        return self.classifier.forward(x)

    def backward(self, dscores, extra=None):
        """``extra`` maps a block number to a gradient on that block's output."""
        extra = extra or {}
        dy = self.classifier.backward(dscores)
        for b in reversed(range(len(self.blocks))):
            if b in extra:
                dy = dy + extra[b]
            dy = self.unpools[b].backward(self.blocks[b].backward(dy))
        return dy

    @property
    def feature_channels(self):
        return self.classifier.in_channels


class SegNet(Module):
    """Encoder/decoder FCN producing scores at input resolution.

    ``widths`` overrides the five encoder widths; otherwise the VGG-16
    widths are multiplied by ``width_scale``.
    """

    architecture = "segnet"

    def __init__(
        self,
        in_channels=3,
        n_classes=6,
        widths=None,
        width_scale=1.0,
        block_order="conv-bn-relu",
        seed=0,
        modality="optical",
    ):
        rng = np.random.default_rng(seed)
        self.inputs = (modality,)
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.width_scale = width_scale
        self.widths = tuple(widths) if widths is not None else scaled_widths(width_scale)
        self.block_order = block_order
        self.encoder = Encoder(in_channels, self.widths, block_order, rng)
        self.decoder = Decoder(self.widths, n_classes, block_order, rng)
        self.features = None
        self.name_parameters()

    def manifest(self):
        return {
            "architecture": self.architecture,
            "inputs": list(self.inputs),
            "k": self.n_classes,
            "in_channels": self.in_channels,
            "width_scale": self.width_scale,
            "widths": list(self.widths),
            "block_order": self.block_order,
        }

    def forward(self, x):
        _check_divisible(x)
        bottom, indices = self.encoder.forward(x)
        scores = self.decoder.forward(bottom, indices)
        self.features = self.decoder.block_outputs[-1]
        return scores

    def backward(self, dscores):
        return self.encoder.backward(self.decoder.backward(dscores))

    def forward_train(self, inputs, target, criterion):
        scores = self.forward(*inputs)
        loss, dscores = criterion(scores, target)
        self.backward(dscores)
        return loss, scores

    def set_encoder_lr_multiplier(self, value):
        for p in self.encoder.parameters():
            p.lr_multiplier = float(value)


def downsample_labels(target, factor, ignore_index=IGNORE_LABEL):
    """Majority label of each ``factor x factor`` block.

    Ignored pixels do not vote; a block with no valid pixel is ignored. Vote
    ties resolve to the lowest label.
    """
    if factor == 1:
        return target
    n, _, h, w = target.shape
    if h % factor or w % factor:
        raise ShapeError(f"target {h}x{w} not divisible by {factor}")
    blocks = target.reshape(n, h // factor, factor, w // factor, factor)
    blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(n, h // factor, w // factor, -1)
    valid = blocks != ignore_index
    n_labels = int(target[target != ignore_index].max(initial=0)) + 1
    counts = np.stack([((blocks == c) & valid).sum(-1) for c in range(n_labels)], axis=-1)
    out = counts.argmax(-1)
    out[~valid.any(-1)] = ignore_index
    return out[:, None].astype(target.dtype)


class MultiScaleSegNet(SegNet):
    """SegNet with deep supervision branches at downscale factors 2, 4, 8.

    The full-resolution output is ``P_0 + f2(P_2) + f4(P_4) + f8(P_8)``
    with ``f_d`` bilinear upsampling; only the first ``branches`` factors
    are used.
    """

    architecture = "segnet_ms"

    def __init__(self, *args, branches=3, **kwargs):
        super().__init__(*args, **kwargs)
        if not 0 <= branches <= 3:
            raise ArgumentError("branches must be between 0 and 3")
        self.branches = branches
        self.factors = BRANCH_FACTORS[:branches]
        rng = np.random.default_rng([kwargs.get("seed", 0), 1])
        self.heads = []
        self.upsamplers = []
        for d in self.factors:
            c = self.decoder.blocks[BRANCH_BLOCK[d]].out_channels
            self.heads.append(Conv2D(c, self.n_classes, 1, 0, rng=rng))
            self.upsamplers.append(BilinearUpsample(d))
        self.full_resolution = None
        self.branch_outputs = {}
        self.name_parameters()

    def manifest(self):
        m = super().manifest()
        m["branches"] = self.branches
        return m

    def forward(self, x):
        p0 = super().forward(x)
        self.full_resolution = p0
        self.branch_outputs = {}
        total = p0
        for d, head, up in zip(self.factors, self.heads, self.upsamplers):
            pd = head.forward(self.decoder.block_outputs[BRANCH_BLOCK[d]])
            self.branch_outputs[d] = pd
            total = total + up.forward(pd)
        return total

    def multiscale_forward(self, x):
        full = self.forward(x)
        return full, [self.branch_outputs[d] for d in self.factors]

    def backward(self, dscores, dbranches=None):
        dbranches = dbranches or {}
        extra = {}
        for d, head, up in zip(self.factors, self.heads, self.upsamplers):
            dpd = up.backward(dscores)
            if d in dbranches:
                dpd = dpd + dbranches[d]
            extra[BRANCH_BLOCK[d]] = head.backward(dpd)
        return self.encoder.backward(self.decoder.backward(dscores, extra))

    def forward_train(self, inputs, target, criterion):
        scores = self.forward(*inputs)
        loss, dfull, dbranches = multiscale_loss(
            scores, self.branch_outputs, target, criterion
        )
        self.backward(dfull, dbranches)
        return loss, scores


def multiscale_loss(full, branch_outputs, target, criterion):
    """Sum of the full-resolution loss and one loss per downscaled branch.

    Returns ``(total, dfull, {factor: dbranch})``.
    """
    if full.shape[2:] != target.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match scores {full.shape}")
    total, dfull = criterion(full, target)
    grads = {}
    for d, pd in branch_outputs.items():
        small = downsample_labels(target, d)
        if pd.shape[2:] != small.shape[2:]:
            raise ShapeError(f"branch {d} scores {pd.shape} do not match target {small.shape}")
        loss_d, grads[d] = criterion(pd, small)
        total += loss_d
    return total, dfull, grads


class FuseNet(Module):
    """Two-encoder early fusion with a single decoder.

    ``mode="sum"``: after every encoder block the auxiliary activations are
    added into the main branch. ``mode="virtual"``: a third encoder fuses
    the streams, ``v_n = block(concat(pool(v_{n-1}), m_n, a_n)) + (m_n + a_n) / 2``,
    and the decoder reads the final virtual encoding. Unpooling uses the
    indices of the branch the decoder reads: main in sum mode, virtual in
    virtual mode. Auxiliary indices are never used.
    """

    def __init__(
        self,
        mode="sum",
        main_channels=3,
        aux_channels=3,
        n_classes=6,
        widths=None,
        width_scale=1.0,
        block_order="conv-bn-relu",
        seed=0,
    ):
        if mode not in ("sum", "virtual"):
            raise ArgumentError(f"unknown fusion mode {mode!r}")
        rng = np.random.default_rng(seed)
        self.inputs = ("optical", "composite")
        self.mode = mode
        self.main_channels = main_channels
        self.aux_channels = aux_channels
        self.n_classes = n_classes
        self.width_scale = width_scale
        self.widths = tuple(widths) if widths is not None else scaled_widths(width_scale)
        self.block_order = block_order
        self.main = Encoder(main_channels, self.widths, block_order, rng)
        self.aux = Encoder(aux_channels, self.widths, block_order, rng)
        self.virtual = []
        self.virtual_pools = []
        self.concats = []
        if mode == "virtual":
            prev = 0
            for w in self.widths:
                self.virtual.append(ConvBlock(prev + 2 * w, [w], block_order, rng))
                self.virtual_pools.append(MaxPool2())
                self.concats.append(Concat())
                prev = w
        self.decoder = Decoder(self.widths, n_classes, block_order, rng)
        self.main_indices = []
        self.aux_indices = []
        self.virtual_indices = []
        self.features = None
        self.name_parameters()

    @property
    def architecture(self):
        return f"fusenet_{self.mode}"

    def manifest(self):
        return {
            "architecture": self.architecture,
            "inputs": list(self.inputs),
            "k": self.n_classes,
            "in_channels": [self.main_channels, self.aux_channels],
            "width_scale": self.width_scale,
            "widths": list(self.widths),
            "block_order": self.block_order,
        }

    def forward(self, main, aux):
        _check_divisible(main)
        if main.shape[0] != aux.shape[0] or main.shape[2:] != aux.shape[2:]:
            raise ShapeError(f"main {main.shape} and auxiliary {aux.shape} inputs disagree")
        self.main_indices = []
        self.aux_indices = []
        self.virtual_indices = []
        last = len(self.widths) - 1
        m_in, a_in, v_in = main, aux, None
        for n in range(len(self.widths)):
            m = self.main.blocks[n].forward(m_in)
            a = self.aux.blocks[n].forward(a_in)
            if self.mode == "sum":
                m = m + a
            else:
                parts = (m, a) if v_in is None else (v_in, m, a)
                v = self.virtual[n].forward(self.concats[n].forward(*parts)) + (m + a) * m.dtype.type(0.5)
                v_in = self.virtual_pools[n].forward(v)
                self.virtual_indices.append(self.virtual_pools[n].indices)
            m_in = self.main.pools[n].forward(m)
            self.main_indices.append(self.main.pools[n].indices)
            if n < last:
                a_in = self.aux.pools[n].forward(a)
                self.aux_indices.append(self.aux.pools[n].indices)
        if self.mode == "sum":
            scores = self.decoder.forward(m_in, self.main_indices)
        else:
            scores = self.decoder.forward(v_in, self.virtual_indices)
        self.features = self.decoder.block_outputs[-1]
        return scores

    def backward(self, dscores):
        dbottom = self.decoder.backward(dscores)
        half = dscores.dtype.type(0.5)
        last = len(self.widths) - 1
        dm_in = dbottom if self.mode == "sum" else None
        dv_in = dbottom if self.mode == "virtual" else None
        da_in = None
        for n in reversed(range(len(self.widths))):
            dm = self.main.pools[n].backward(dm_in) if dm_in is not None else None
            da = self.aux.pools[n].backward(da_in) if n < last else None
            if self.mode == "sum":
                da = dm if da is None else da + dm
            else:
                dv = self.virtual_pools[n].backward(dv_in)
                dparts = self.concats[n].backward(self.virtual[n].backward(dv))
                if n > 0:
                    dv_in, dm_part, da_part = dparts
                else:
                    dm_part, da_part = dparts
                dm_part = dm_part + dv * half
                da_part = da_part + dv * half
                dm = dm_part if dm is None else dm + dm_part
                da = da_part if da is None else da + da_part
            dm_in = self.main.blocks[n].backward(dm)
            da_in = self.aux.blocks[n].backward(da)
        return dm_in, da_in

    def forward_train(self, inputs, target, criterion):
        scores = self.forward(*inputs)
        loss, dscores = criterion(scores, target)
        self.backward(dscores)
        return loss, scores

    def set_encoder_lr_multiplier(self, value):
        for p in self.main.parameters() + self.aux.parameters():
            p.lr_multiplier = float(value)


class CorrectionNet(Module):
    """Three 3x3 convolutions; the last starts at zero so its output does too."""

    def __init__(self, in_channels, n_classes, hidden=(32, 32), seed=0):
        rng = np.random.default_rng(seed)
        self.convs = []
        self.relus = []
        c = in_channels
        for h in hidden:
            self.convs.append(Conv2D(c, h, 3, 1, rng=rng))
            self.relus.append(ReLU())
            c = h
        self.convs.append(Conv2D(c, n_classes, 3, 1, rng=rng))
        self.convs[-1].zero_init()

    def forward(self, x):
        for conv, relu in zip(self.convs, self.relus):
            x = relu.forward(conv.forward(x))
        return self.convs[-1].forward(x)

    def backward(self, dy):
        dy = self.convs[-1].backward(dy)
        for conv, relu in zip(reversed(self.convs[:-1]), reversed(self.relus)):
            dy = conv.backward(relu.backward(dy))
        return dy


class ResidualCorrection(Module):
    """Late fusion: ``P' = mean_i softmax(base_i(x_i)) + c``.

    The bases are frozen (always in eval mode, never updated); ``c`` comes
    from a small network over the concatenated last decoder feature maps of
    the bases. Base ``i`` consumes input ``i``.
    """

    architecture = "residual_correction"

    def __init__(self, bases, n_classes=None, hidden=(32, 32), seed=0):
        if not bases:
            raise ArgumentError("residual correction needs at least one base model")
        self.bases = list(bases)
        self.inputs = tuple(m for b in self.bases for m in b.inputs)
        self.n_classes = n_classes or self.bases[0].n_classes
        for base in self.bases:
            base.eval()
        in_c = sum(b.decoder.feature_channels for b in self.bases)
        self.concat = Concat()
        self.correction = CorrectionNet(in_c, self.n_classes, hidden, seed)
        self.p_avg = None
        self.name_parameters()

    def manifest(self):
        return {
            "architecture": self.architecture,
            "inputs": list(self.inputs),
            "k": self.n_classes,
            "bases": [b.manifest() for b in self.bases],
            "block_order": self.bases[0].block_order,
            "width_scale": self.bases[0].width_scale,
        }

    def named_trainable_parameters(self):
        return self.correction.named_parameters("correction.")

    def train(self, mode=True):
        self.training = mode
        self.correction.train(mode)
        return self

    def forward(self, *inputs):
        if len(inputs) != len(self.bases):
            raise ShapeError(f"expected {len(self.bases)} inputs, got {len(inputs)}")
        probs, feats = [], []
        for base, x in zip(self.bases, inputs):
            scores = base.forward(x)
            if probs and scores.shape != probs[0].shape:
                raise ShapeError(f"base outputs disagree: {scores.shape} vs {probs[0].shape}")
            probs.append(softmax_channels(scores))
            feats.append(base.features)
        p_avg = probs[0]
        for p in probs[1:]:
            p_avg = p_avg + p
        p_avg = p_avg / p_avg.dtype.type(len(probs))
        self.p_avg = p_avg
        return p_avg + self.correction.forward(self.concat.forward(*feats))

    def backward(self, dy):
        self.correction.backward(dy)
        return [None] * len(self.bases)

    def forward_train(self, inputs, target, criterion):
        out = self.forward(*inputs)
        loss, dout = criterion(out, target)
        self.backward(dout)
        return loss, out


ARCHITECTURES = ("segnet", "segnet_ms", "fusenet_sum", "fusenet_virtual", "residual_correction")


def build_model(manifest, seed=0):
    """Instantiate a model from a manifest dict (as stored in checkpoints)."""
    arch = manifest["architecture"]
    common = dict(
        n_classes=int(manifest["k"]),
        widths=manifest.get("widths"),
        width_scale=float(manifest.get("width_scale", 1.0)),
        block_order=manifest.get("block_order", "conv-bn-relu"),
        seed=seed,
    )
    modality = manifest.get("inputs", ["optical"])[0]
    if arch == "segnet":
        return SegNet(in_channels=int(manifest.get("in_channels", 3)), modality=modality, **common)
    if arch == "segnet_ms":
        return MultiScaleSegNet(
            in_channels=int(manifest.get("in_channels", 3)),
            modality=modality,
            branches=int(manifest.get("branches", 3)),
            **common,
        )
    if arch in ("fusenet_sum", "fusenet_virtual"):
        main_c, aux_c = manifest.get("in_channels", [3, 3])
        return FuseNet(arch.split("_")[1], int(main_c), int(aux_c), **common)
    if arch == "residual_correction":
        bases = [build_model(m, seed) for m in manifest["bases"]]
        return ResidualCorrection(bases, int(manifest["k"]), seed=seed)
    raise ArgumentError(f"unknown architecture {arch!r}")
