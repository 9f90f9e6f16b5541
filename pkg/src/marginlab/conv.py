"""Convolution layers materialized as dense matrices."""

from __future__ import annotations

import numpy as np

from marginlab.linalg import InvalidInputError

MAX_SIDE = 32


def conv_output_shape(input_shape, kernel: tuple[int, int], stride: int, padding: int) -> tuple[int, int]:
    _, h, w = input_shape
    kh, kw = kernel
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidInputError("filter larger than padded input")
    return ho, wo


def conv_as_dense(filters, input_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Dense matrix of a 2-D cross-correlation with zero padding.

    ``filters`` has shape ``(out_channels, in_channels, kh, kw)`` (a 2-D
    array is one single-channel filter) and ``input_shape`` is ``(C, H, W)``
    or ``(H, W)``. Inputs and outputs are flattened channel-major, row-major.
    """
    F = np.asarray(filters, dtype=np.float64)
    if F.ndim == 2:
        F = F[None, None]
    if len(input_shape) == 2:
        input_shape = (1, *input_shape)
    c, h, w = (int(s) for s in input_shape)
    if h > MAX_SIDE or w > MAX_SIDE:
        raise InvalidInputError(f"input {h}x{w} exceeds the {MAX_SIDE}x{MAX_SIDE} cap")
    if F.ndim != 4 or F.shape[1] != c:
        raise InvalidInputError(f"filters of shape {F.shape} do not match {c} input channels")
    if int(stride) != stride or stride < 1 or padding < 0:
        raise InvalidInputError("stride must be a positive integer and padding non-negative")
    oc, _, kh, kw = F.shape
    ho, wo = conv_output_shape((c, h, w), (kh, kw), stride, padding)
    M = np.zeros((oc * ho * wo, c * h * w))
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                row = (o * ho + i) * wo + j
                for di in range(kh):
                    y = i * stride + di - padding
                    if not 0 <= y < h:
                        continue
                    for dj in range(kw):
                        x = j * stride + dj - padding
                        if not 0 <= x < w:
                            continue
                        M[row, np.arange(c) * h * w + y * w + x] += F[o, :, di, dj]
    return M
