import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netdeconv.errors import ContractError, ShapeError
from netdeconv.models.whitening import PatchSpec
from netdeconv.services.patches import (
    col2im,
    direct_conv2d,
    im2col,
    nchw_to_rows,
    partition_groups,
    rows_to_nchw,
    subsample_rows,
)


@pytest.mark.parametrize("stride,padding,size", [(1, 0, 6), (1, 1, 6), (2, 0, 7), (2, 1, 7)])
def test_im2col_gemm_matches_direct_convolution(rng, stride, padding, size):
    x = rng.normal(size=(2, 3, size, size))
    kernel = rng.normal(size=(4, 3, 3, 3))
    spec = PatchSpec(3, stride, padding, channels_in=3)
    X = im2col(x, spec)
    y = rows_to_nchw(X.data @ kernel.reshape(4, -1).T, X.batch, X.out_h, X.out_w)
    np.testing.assert_allclose(y, direct_conv2d(x, kernel, stride, padding), atol=1e-12)


def test_columns_are_channel_major(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    X = im2col(x, PatchSpec(3, channels_in=2))
    for c in range(2):
        single = im2col(x[:, c:c + 1], PatchSpec(3, channels_in=1))
        np.testing.assert_array_equal(X.data[:, c * 9:(c + 1) * 9], single.data)


def test_col2im_is_adjoint(rng):
    spec = PatchSpec(3, 2, 1, channels_in=2)
    x = rng.normal(size=(2, 2, 7, 7))
    X = im2col(x, spec)
    g = rng.normal(size=X.data.shape)
    left = float(np.sum(X.data * g))
    right = float(np.sum(x * col2im(g, spec, x.shape)))
    assert left == pytest.approx(right, rel=1e-12)


def test_non_integer_output_raises():
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 1, 6, 6)), PatchSpec(3, stride=2))


def test_kernel_larger_than_input_raises():
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 1, 2, 2)), PatchSpec(3))


def test_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 2, 5, 5)), PatchSpec(3, channels_in=3))


def test_invalid_spec_raises():
    with pytest.raises(ContractError):
        PatchSpec(0)
    with pytest.raises(ContractError):
        PatchSpec(3, stride=0)


def test_partition_groups_with_remainder(rng):
    x = rng.normal(size=(1, 5, 4, 4))
    X = im2col(x, PatchSpec(3, channels_in=5, block_size=2))
    groups = partition_groups(X)
    assert [g.cols for g in groups] == [18, 18, 9]
    assert [g.column_offset for g in groups] == [0, 18, 36]
    np.testing.assert_array_equal(np.hstack([g.data for g in groups]), X.data)


def test_block_size_clipped_to_channels():
    spec = PatchSpec(3, channels_in=3, block_size=64)
    assert spec.group_width == 3
    assert spec.groups == 1


def test_subsample_rows_takes_every_sth_position(rng):
    x = rng.normal(size=(2, 1, 6, 6))
    X = im2col(x, PatchSpec(3))
    assert subsample_rows(X, 1) is X.data
    sampled = subsample_rows(X, 2)
    assert sampled.shape == (2 * 2 * 2, 9)
    grid = X.data.reshape(2, 4, 4, 9)
    np.testing.assert_array_equal(sampled[:4], grid[0, ::2, ::2].reshape(-1, 9))


def test_rows_nchw_inverse(rng):
    y = rng.normal(size=(2, 3, 4, 5))
    np.testing.assert_array_equal(rows_to_nchw(nchw_to_rows(y), 2, 4, 5), y)


@settings(max_examples=40, deadline=None)
@given(kernel=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2), out=st.integers(1, 4),
       channels=st.integers(1, 3), block=st.integers(1, 3), data=st.data())
def test_adjoint_and_partition_properties(kernel, stride, out, channels, block, data):
    padding = data.draw(st.integers(0, kernel // 2))
    size = (out - 1) * stride + kernel - 2 * padding
    spec = PatchSpec(kernel, stride, padding, channels, block_size=block)
    rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
    x = rng.normal(size=(2, channels, size, size))
    X = im2col(x, spec)
    assert (X.out_h, X.out_w) == (out, out)

    g = rng.normal(size=X.data.shape)
    left = float(np.sum(X.data * g))
    right = float(np.sum(x * col2im(g, spec, x.shape)))
    assert left == pytest.approx(right, rel=1e-9, abs=1e-9)

    groups = partition_groups(X)
    assert sum(group.cols for group in groups) == spec.columns
    assert all(group.cols == spec.group_width * kernel * kernel for group in groups[:-1])


@pytest.mark.parametrize("kernel", [3, 5])
def test_adjacent_columns_are_shifted_patches(rng, kernel):
    x = rng.normal(size=(2, 2, 8, 9))
    spec = PatchSpec(kernel, channels_in=2)
    X = im2col(x, spec)
    shifted = im2col(x[:, :, :, 1:], spec)
    grid = X.data.reshape(2, X.out_h, X.out_w, -1)
    shifted_grid = shifted.data.reshape(2, shifted.out_h, shifted.out_w, -1)
    assert shifted.out_w == X.out_w - 1
    for channel in range(2):
        for ky in range(kernel):
            for kx in range(kernel - 1):
                c = channel * kernel * kernel + ky * kernel + kx
                np.testing.assert_array_equal(grid[:, :, :-1, c + 1], shifted_grid[:, :, :, c])
