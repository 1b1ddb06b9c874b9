import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfn.data.patches import (
    coverage_counts,
    extract_patches,
    patch_grid,
    predict_tile,
    stitch_predictions,
)
from mfn.data.raster import (
    RasterTile,
    Role,
    build_composite,
    composite_input,
    compute_ndvi,
    decode_tile,
    encode_tile,
    minmax_scale,
    optical_input,
    read_mrt,
    write_mrt,
)
from mfn.data.synth import CLASS_NAMES, generate_layers, synth_pack, synth_scene
from mfn.errors import ArgumentError, DataError, FormatError, ShapeError
from mfn.models import SegNet
from mfn.tensor import softmax_channels

# --- NDVI and composite ----------------------------------------------------


def test_ndvi_examples():
    assert compute_ndvi(np.array([0.4]), np.array([0.4]))[0] == 0.0
    assert compute_ndvi(np.array([0.8]), np.array([0.2]))[0] == pytest.approx(0.6)
    assert compute_ndvi(np.array([0.0]), np.array([0.0]))[0] == 0.0


def test_ndvi_rejects_negative_reflectance():
    with pytest.raises(DataError):
        compute_ndvi(np.array([0.1, -0.1]), np.array([0.2, 0.2]))


@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6)), min_size=1, max_size=50))
def test_ndvi_bounds(pairs):
    ir, r = np.array(pairs).T
    out = compute_ndvi(ir, r)
    assert np.all(out >= -1) and np.all(out <= 1)


def test_composite_scaling_and_order():
    dsm = np.array([[10.0, 20.0], [30.0, 15.0]])
    ndsm = np.full((2, 2), 4.0)
    ndvi = np.array([[0.1, -0.2], [0.3, 0.0]])
    tile = build_composite(dsm, ndsm, ndvi)
    assert tile.roles == [Role.DSM, Role.NDSM, Role.NDVI]
    assert tile.plane(Role.DSM)[0, 1] == 0.5
    assert not tile.plane(Role.NDSM).any()
    np.testing.assert_array_equal(tile.plane(Role.NDVI), ndvi.astype(np.float32))


def test_composite_dim_mismatch():
    with pytest.raises(ShapeError):
        build_composite(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


def test_minmax_constant_plane():
    assert not minmax_scale(np.full((3, 3), 7.0)).any()


def test_optical_input_scaling():
    tile = RasterTile(1, 2)
    for role in (Role.IR, Role.R, Role.G):
        tile.add(role, np.array([[0.0, 255.0]]))
    x = optical_input(tile)
    assert x.shape == (3, 1, 2) and x.max() == 1.0
    assert optical_input(tile, scale=510.0).max() == 0.5


# --- MRT files -------------------------------------------------------------


def sample_tile():
    rng = np.random.default_rng(0)
    tile = RasterTile(3, 5)
    tile.add(Role.IR, rng.random((3, 5)))
    tile.add(Role.NDVI, rng.random((3, 5)) * 2 - 1)
    tile.add(Role.LABEL, rng.integers(0, 6, (3, 5)).astype(np.uint8))
    return tile


def test_header_layout():
    data = encode_tile(sample_tile())
    assert data[:4] == b"MRT1"
    assert data[4] == 1 and data[5] == 3
    assert data[6:8] == b"\x00\x00"
    assert int.from_bytes(data[8:12], "little") == 3
    assert int.from_bytes(data[12:16], "little") == 5
    assert data[16:18] == bytes([0, 0])
    assert len(data) == 16 + 2 * (2 + 15 * 4) + 2 + 15


def test_round_trip_is_bit_exact(tmp_path):
    tile = sample_tile()
    path = tmp_path / "t.mrt"
    write_mrt(path, tile)
    back = read_mrt(path)
    assert back.roles == tile.roles
    for (_, a), (_, b) in zip(tile.channels, back.channels):
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    assert back.plane(Role.LABEL).dtype == np.uint8
    assert encode_tile(back) == encode_tile(tile)


@pytest.mark.parametrize("cut", [3, 10, 17, 40, -1])
def test_truncated_file(cut):
    data = encode_tile(sample_tile())
    with pytest.raises(FormatError, match="byte offset"):
        decode_tile(data[:cut])


def test_bad_magic_and_trailing_bytes():
    data = encode_tile(sample_tile())
    with pytest.raises(FormatError) as info:
        decode_tile(b"XRT1" + data[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        decode_tile(data + b"\x00")


def test_label_plane_must_be_uint8():
    with pytest.raises(DataError):
        RasterTile(1, 1, [(Role.LABEL, np.zeros((1, 1), dtype=np.float32))])


def test_plane_dims_must_match():
    with pytest.raises(ShapeError):
        RasterTile(2, 2).add(Role.R, np.zeros((2, 3)))


# --- patch grid ------------------------------------------------------------


def axis(grid):
    return sorted({r for r, _ in grid.origins})


def test_grid_256_stride_64():
    grid = patch_grid(256, 256, 128, 64)
    assert axis(grid) == [0, 64, 128] and len(grid) == 9


@pytest.mark.parametrize("stride", [1, 32, 128, 500])
def test_exact_fit_single_window(stride):
    assert patch_grid(128, 128, 128, stride).origins == ((0, 0),)


def test_large_tile_clamps_last_window():
    grid = patch_grid(2100, 2100, 128, 32)
    assert axis(grid) == list(range(0, 1953, 32)) + [1972]
    assert coverage_counts(grid).min() >= 1


def test_patch_larger_than_tile():
    with pytest.raises(ArgumentError):
        patch_grid(100, 256, 128, 64)


def test_stride_beyond_patch_would_leave_gaps():
    with pytest.raises(ArgumentError):
        patch_grid(256, 256, 64, 65)


@settings(max_examples=60)
@given(st.integers(128, 512), st.integers(128, 512), st.sampled_from([32, 64, 128]), st.integers(1, 128))
def test_grid_invariants(h, w, patch, stride):
    stride = min(stride, patch)
    grid = patch_grid(h, w, patch, stride)
    counts = coverage_counts(grid)
    assert counts.min() >= 1
    assert counts.sum() == len(grid) * patch * patch
    assert all(0 <= r <= h - patch and 0 <= c <= w - patch for r, c in grid.origins)
    assert list(grid.origins) == sorted(set(grid.origins))


# --- stitching -------------------------------------------------------------


def test_constant_windows_stitch_to_constant():
    grid = patch_grid(192, 160, 128, 32)
    p = np.array([0.1, 0.6, 0.3], dtype=np.float32)
    windows = [np.broadcast_to(p[:, None, None], (3, 128, 128)) for _ in grid.origins]
    out = stitch_predictions(windows, grid)
    np.testing.assert_allclose(out, np.broadcast_to(p[:, None, None], out.shape), atol=1e-7)


def test_two_window_overlap_mean():
    grid = patch_grid(128, 192, 128, 64)
    assert len(grid) == 2
    p = np.full((2, 128, 128), 0.2, dtype=np.float32)
    q = np.full((2, 128, 128), 0.6, dtype=np.float32)
    out = stitch_predictions([p, q], grid)
    assert out[0, 0, 0] == pytest.approx(0.2)
    assert out[0, 0, 100] == pytest.approx(0.4)
    assert out[0, 0, 150] == pytest.approx(0.6)


def naive_stitch(windows, grid):
    k = windows[0].shape[0]
    out = np.zeros((k, grid.height, grid.width))
    p = grid.patch_size
    for y in range(0, grid.height, 7):
        for x in range(0, grid.width, 7):
            covering = [
                win[:, y - r, x - c]
                for (r, c), win in zip(grid.origins, windows)
                if r <= y < r + p and c <= x < c + p
            ]
            out[:, y, x] = np.mean(covering, axis=0)
    return out


@settings(max_examples=10, deadline=None)
@given(st.integers(128, 320), st.integers(128, 320), st.sampled_from([32, 64, 128]), st.integers(0, 1000))
def test_stitch_matches_naive_oracle(h, w, stride, seed):
    grid = patch_grid(h, w, 128, stride)
    rng = np.random.default_rng(seed)
    windows = [softmax_channels(rng.standard_normal((1, 3, 128, 128)))[0] for _ in grid.origins]
    out = stitch_predictions(windows, grid)
    ref = naive_stitch(windows, grid)
    np.testing.assert_allclose(out[:, ::7, ::7], ref[:, ::7, ::7], atol=1e-6)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-5)


def test_stitch_window_count_mismatch():
    grid = patch_grid(256, 256, 128, 64)
    with pytest.raises(ArgumentError):
        stitch_predictions([np.zeros((2, 128, 128))] * 3, grid)


@pytest.mark.parametrize("stride", [64, 128])
def test_predict_tile_equals_stitched_windows(stride):
    model = SegNet(3, 4, widths=(4, 4, 4, 4, 4), seed=1)
    x = np.random.default_rng(2).random((3, 192, 160)).astype(np.float32)
    probs = predict_tile(model, (x,), 128, stride, batch_size=3)
    grid = patch_grid(192, 160, 128, stride)
    model.eval()
    windows = [softmax_channels(model.forward(x[None, :, r : r + 128, c : c + 128]))[0] for r, c in grid.origins]
    np.testing.assert_allclose(probs, stitch_predictions(windows, grid), atol=1e-6)
    assert probs.shape == (4, 192, 160)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)


# --- patch extraction ------------------------------------------------------


def coordinate_tiles(n=2, h=256, w=320):
    """Inputs whose values encode (tile, row, col), for alignment audits."""
    tiles = []
    for t in range(n):
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float32)
        opt = np.stack([rows, cols, np.full((h, w), t, dtype=np.float32)])
        comp = np.stack([rows + 0.5, cols + 0.5, np.full((h, w), t + 0.5, dtype=np.float32)])
        labels = ((rows + cols + t) % 6).astype(np.uint8)
        tiles.append(((opt, comp), labels))
    return tiles


def test_disjoint_patch_count():
    patches = extract_patches(coordinate_tiles(1, 256, 320), 128, 128, seed=0)
    assert len(patches) == int(np.ceil(256 / 128) * np.ceil(320 / 128))


def test_same_seed_same_order():
    a = extract_patches(coordinate_tiles(), 128, 64, seed=3)
    b = extract_patches(coordinate_tiles(), 128, 64, seed=3)
    c = extract_patches(coordinate_tiles(), 128, 64, seed=4)
    assert [(p.tile, p.row, p.col) for p in a] == [(p.tile, p.row, p.col) for p in b]
    assert [(p.tile, p.row, p.col) for p in a] != [(p.tile, p.row, p.col) for p in c]


def test_patches_are_pixel_aligned():
    for p in extract_patches(coordinate_tiles(), 128, 64, seed=0):
        opt, comp = p.inputs
        assert opt[0, 0, 0] == p.row and opt[1, 0, 0] == p.col and opt[2, 0, 0] == p.tile
        np.testing.assert_array_equal(comp, opt + 0.5)
        np.testing.assert_array_equal(p.target[0], (opt[0] + opt[1] + opt[2]) % 6)


def test_extract_dim_mismatch():
    with pytest.raises(DataError):
        extract_patches([((np.zeros((3, 128, 128)),), np.zeros((128, 256), dtype=np.uint8))])


# --- synthetic scenes ------------------------------------------------------


def test_scene_is_deterministic():
    a = [encode_tile(t) for t in synth_scene(11, 128)]
    b = [encode_tile(t) for t in synth_scene(11, 128)]
    assert a == b
    assert a != [encode_tile(t) for t in synth_scene(12, 128)]


def test_scene_contains_all_classes():
    _, _, label = synth_scene(7, 256)
    assert set(np.unique(label.plane(Role.LABEL))) == set(range(len(CLASS_NAMES)))


def test_scene_size_must_divide_by_32():
    with pytest.raises(ArgumentError):
        synth_scene(0, 250)


@pytest.mark.parametrize("seed", [0, 7, 123])
def test_ambiguity_is_confined_to_composite(seed):
    optical, composite, label = synth_scene(seed, 256)
    lab = label.plane(Role.LABEL)
    x = optical_input(optical)
    comp = composite_input(composite)
    # road ribbons are the asphalt part of the impervious class
    material = generate_layers(seed, 256)["material"]
    building, road = lab == 1, (lab == 0) & (material == 1)
    optical_gap = np.abs(x[:, building].mean(axis=1) - x[:, road].mean(axis=1)).max()
    ndsm_gap = comp[1][building].mean() - comp[1][road].mean()
    assert optical_gap < 0.02
    assert ndsm_gap > 0.5
    tree, low = lab == 3, lab == 2
    assert abs(comp[2][tree].mean() - comp[2][low].mean()) < 0.05
    assert comp[1][tree].mean() - comp[1][low].mean() > 0.2


def test_layers_have_physical_units():
    layers = generate_layers(3, 128)
    assert layers["ndsm"].min() >= 0
    terrain = layers["dsm"] - layers["ndsm"]
    # bare ground is a tilted plane
    np.testing.assert_allclose(np.diff(terrain, 2, axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(np.diff(terrain, 2, axis=1), 0, atol=1e-9)


def test_pack_uses_distinct_tiles():
    pack = synth_pack(3, 64, seed=5)
    assert len(pack) == 3
    labels = [p[2].plane(Role.LABEL) for p in pack]
    assert not np.array_equal(labels[0], labels[1])
