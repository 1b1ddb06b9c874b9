import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfn.errors import DimensionError, NumericError, ShapeError
from mfn.tensor import Parameter, argmax_channel, elementwise, softmax_channels, tensor_new

finite32 = st.floats(-1e3, 1e3, width=32, allow_nan=False, allow_infinity=False)
small_dims = st.tuples(*(st.integers(1, 3) for _ in range(4)))


def test_tensor_new_zero_fill():
    t = tensor_new((1, 1, 2, 2), 0.0)
    assert t.dtype == np.float32
    assert t.tolist() == [[[[0.0, 0.0], [0.0, 0.0]]]]


def test_tensor_new_constant_fill():
    t = tensor_new((1, 2, 1, 1), 3.5)
    assert t[0, :, 0, 0].tolist() == [3.5, 3.5]


@pytest.mark.parametrize("dims", [(1, 1, 0, 1), (0, 1, 1, 1), (1, 1, 1), (2**20, 2**20, 2, 1)])
def test_tensor_new_rejects_bad_dims(dims):
    with pytest.raises(DimensionError):
        tensor_new(dims)


@given(small_dims, finite32)
def test_tensor_new_reads_back_fill_exactly(dims, fill):
    t = tensor_new(dims, fill)
    assert t.size == int(np.prod(dims))
    assert np.all(t == np.float32(fill))


def test_elementwise_examples():
    a = np.array([[[[1, 2]]]], dtype=np.float32)
    b = np.array([[[[3, 4]]]], dtype=np.float32)
    assert elementwise(a, b, "add").tolist() == [[[[4, 6]]]]
    assert elementwise(a, b, "sub").tolist() == [[[[-2, -2]]]]
    assert elementwise(a, b, "mul").tolist() == [[[[3, 8]]]]
    assert elementwise(np.array([[[[2, 4]]]], dtype=np.float32), 0.5, "scale").tolist() == [[[[1, 2]]]]


@given(arrays(np.float32, (2, 2, 3, 3), elements=finite32))
def test_average_is_idempotent(a):
    np.testing.assert_array_equal(elementwise(a, a, "average"), a)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise(tensor_new((1, 1, 2, 2)), tensor_new((1, 1, 2, 3)), "add")


def test_elementwise_overflow_is_numeric_error():
    big = tensor_new((1, 1, 1, 1), 3e38)
    with pytest.raises(NumericError):
        elementwise(big, big, "add")


@settings(max_examples=30)
@given(st.lists(arrays(np.float32, (1, 2, 2, 2), elements=finite32), min_size=3, max_size=3))
def test_add_matches_flat_loop_oracle_in_any_order(ops):
    for perm in itertools.permutations(ops):
        total = perm[0]
        for t in perm[1:]:
            total = elementwise(total, t, "add")
        expected = np.empty(total.size, dtype=np.float32)
        for i in range(total.size):
            acc = perm[0].ravel()[i]
            for t in perm[1:]:
                acc = np.float32(acc + t.ravel()[i])
            expected[i] = acc
        np.testing.assert_array_equal(total.ravel(), expected)
    # commutativity is exact for a pairwise sum
    np.testing.assert_array_equal(elementwise(ops[0], ops[1], "add"), elementwise(ops[1], ops[0], "add"))


def test_argmax_examples():
    t = np.zeros((1, 2, 1, 2), dtype=np.float32)
    t[0, :, 0, 0] = (0.1, 0.9)
    t[0, :, 0, 1] = (0.5, 0.5)
    out = argmax_channel(t)
    assert out.shape == (1, 1, 1, 2)
    assert out.ravel().tolist() == [1, 0]
    assert argmax_channel(np.ones((2, 1, 3, 3), dtype=np.float32)).sum() == 0


@given(
    arrays(np.float32, (1, 4, 3, 3), elements=st.integers(-50, 50).map(float)),
    arrays(np.float32, (1, 1, 3, 3), elements=st.integers(-50, 50).map(float)),
)
def test_argmax_invariant_to_per_pixel_shift(t, shift):
    np.testing.assert_array_equal(argmax_channel(t), argmax_channel(t + shift))


def test_softmax_sums_to_one():
    x = np.random.default_rng(0).standard_normal((2, 5, 3, 3)).astype(np.float32) * 30
    p = softmax_channels(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)


def test_parameter_buffers_share_shape():
    p = Parameter(np.ones((2, 3, 1, 1)), "w")
    assert p.value.shape == p.grad.shape == p.velocity.shape
    assert p.lr_multiplier == 1.0
    with pytest.raises(ValueError):
        Parameter(np.ones(2), lr_multiplier=0)
