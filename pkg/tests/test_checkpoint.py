import struct

import numpy as np
import pytest

from mfn.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from mfn.errors import CheckpointError
from mfn.models import FuseNet, MultiScaleSegNet, SegNet

SMALL = dict(n_classes=6, widths=(4, 4, 4, 4, 4))


def _perturb(model):
    rng = np.random.default_rng(3)
    for p in model.parameters():
        p.value[...] = rng.standard_normal(p.value.shape)
    for _, buf in model.named_buffers():
        buf[...] = rng.uniform(0.5, 2.0, buf.shape)


@pytest.mark.parametrize(
    "factory",
    [
        lambda: SegNet(3, modality="composite", **SMALL),
        lambda: MultiScaleSegNet(3, **SMALL),
        lambda: FuseNet("virtual", 3, 3, **SMALL),
    ],
    ids=["segnet", "segnet_ms", "fusenet_virtual"],
)
def test_round_trip(tmp_path, factory):
    model = factory()
    _perturb(model)
    path = tmp_path / "m.mfn"
    save_checkpoint(str(path), model)
    loaded = load_checkpoint(str(path))
    assert loaded.manifest() == model.manifest()
    assert encode_checkpoint(loaded) == path.read_bytes()
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    inputs = (x,) * len(model.inputs)
    model.eval()
    loaded.eval()
    np.testing.assert_array_equal(model.forward(*inputs), loaded.forward(*inputs))


def test_layout_header():
    data = encode_checkpoint(SegNet(3, **SMALL))
    assert data[:4] == MAGIC
    (mlen,) = struct.unpack("<I", data[4:8])
    assert data[8 : 8 + mlen].startswith(b"{")


def test_bad_magic():
    data = bytearray(encode_checkpoint(SegNet(3, **SMALL)))
    data[:4] = b"MFN0"
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(data))


@pytest.mark.parametrize("cut", [2, 6, 20, -1])
def test_truncated(cut):
    data = encode_checkpoint(SegNet(3, **SMALL))
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        decode_checkpoint(encode_checkpoint(SegNet(3, **SMALL)) + b"\0")


def test_wrong_tensor_count(tmp_path):
    manifest, tensors = decode_checkpoint(encode_checkpoint(SegNet(3, **SMALL)))
    data = bytearray(encode_checkpoint(SegNet(3, **SMALL)))
    (mlen,) = struct.unpack("<I", data[4:8])
    struct.pack_into("<I", data, 8 + mlen, len(tensors) - 1)
    # drop the last tensor so the byte stream stays well formed
    last = tensors[-1]
    body = bytes(data[: len(data) - (1 + 4 * last.ndim + 4 * last.size)])
    path = tmp_path / "short.mfn"
    path.write_bytes(body)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
