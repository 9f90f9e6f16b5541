import numpy as np
import pytest

from marginlab.conv import MAX_SIDE, conv_as_dense, conv_output_shape
from marginlab.linalg import InvalidInputError


def direct_conv(image, filters, stride, padding):
    """Plain nested-loop cross-correlation on a (C, H, W) image."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * padding, w + 2 * padding))
    padded[:, padding : padding + h, padding : padding + w] = image
    oc, _, kh, kw = filters.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oc, ho, wo))
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                patch = padded[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[o, i, j] = np.sum(patch * filters[o])
    return out


class TestConvAsDense:
    def test_unit_1x1_filter_is_identity(self):
        np.testing.assert_array_equal(conv_as_dense(np.ones((1, 1)), (4, 4)), np.eye(16))

    def test_averaging_filter(self):
        np.testing.assert_array_equal(conv_as_dense(np.full((2, 2), 0.25), (2, 2)), [[0.25, 0.25, 0.25, 0.25]])

    def test_random_3x3_on_5x5_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((3, 3))
        # Columns of the oracle are responses to basis images, so every entry is exact.
        basis = np.eye(25).reshape(25, 1, 5, 5)
        oracle = np.stack([direct_conv(e, f[None, None], 1, 0).reshape(-1) for e in basis], axis=1)
        np.testing.assert_array_equal(conv_as_dense(f, (5, 5)), oracle)
        img = rng.standard_normal((5, 5))
        np.testing.assert_allclose(conv_as_dense(f, (5, 5)) @ img.reshape(-1),
                                   direct_conv(img[None], f[None, None], 1, 0).reshape(-1), rtol=0, atol=1e-14)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (2, 1), (3, 2)])
    def test_multichannel_stride_padding(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        f = rng.standard_normal((4, 2, 3, 3))
        img = rng.standard_normal((2, 7, 6))
        got = conv_as_dense(f, img.shape, stride, padding) @ img.reshape(-1)
        np.testing.assert_allclose(got, direct_conv(img, f, stride, padding).reshape(-1), rtol=0, atol=1e-13)

    def test_output_shape(self):
        assert conv_output_shape((1, 32, 32), (5, 5), 1, 2) == (32, 32)

    def test_size_cap(self):
        with pytest.raises(InvalidInputError):
            conv_as_dense(np.ones((3, 3)), (MAX_SIDE + 1, 4))

    @pytest.mark.parametrize("kwargs", [{"stride": 0}, {"stride": 1.5}, {"padding": -1}])
    def test_bad_stride_or_padding(self, kwargs):
        with pytest.raises(InvalidInputError):
            conv_as_dense(np.ones((2, 2)), (4, 4), **kwargs)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidInputError):
            conv_as_dense(np.ones((1, 3, 2, 2)), (2, 4, 4))

    def test_filter_larger_than_input(self):
        with pytest.raises(InvalidInputError):
            conv_as_dense(np.ones((5, 5)), (3, 3))
