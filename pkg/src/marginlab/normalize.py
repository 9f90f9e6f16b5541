"""Weight normalization and the batch-norm to row-normalized-net rewrite."""

from __future__ import annotations

import numpy as np

from marginlab.linalg import InvalidInputError
from marginlab.network import (
    HEADS,
    DegenerateRowError,
    Dense,
    LinearHead,
    NetworkSpec,
    Pooling,
    Residual,
    SoftmaxHead,
    UnsupportedArchitectureError,
    activate,
    softmax,
)


class DegenerateStatisticsError(ValueError):
    def __init__(self, layer: int, row: int):
        super().__init__(f"layer {layer}: batch second moment of row {row} is zero")
        self.layer = layer
        self.row = row


def normalize_rows(W: np.ndarray, layer: int = 0) -> np.ndarray:
    norms = np.linalg.norm(W, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateRowError(layer, int(zero[0]))
    return W / norms[:, None]


def weight_normalize(net: NetworkSpec) -> NetworkSpec:
    """Rescale every weight row to unit Euclidean norm; biases are kept.

    Implements ``diag(W W^T)^{-1/2} W``.
    """
    counter = iter(range(10**9))

    def norm(layer):
        if isinstance(layer, Pooling):
            return layer
        if isinstance(layer, Residual):
            return Residual(tuple(norm(l) for l in layer.inner))
        W = normalize_rows(layer.W, next(counter))
        if isinstance(layer, Dense):
            return Dense(W, layer.b, layer.activation)
        return type(layer)(W, layer.b)

    return NetworkSpec(tuple(norm(l) for l in net.layers), net.input_dim, net.num_classes)


def _check_bn_architecture(net: NetworkSpec):
    for i, layer in enumerate(net.layers[:-1]):
        if not isinstance(layer, Dense) or layer.activation != "relu":
            raise UnsupportedArchitectureError(
                f"layer {i}: batch-norm rewrite needs dense ReLU layers, got {type(layer).__name__}"
            )


def _moment_scale(Zhat: np.ndarray, layer: int) -> np.ndarray:
    moments = np.sum(Zhat * Zhat, axis=0)
    zero = np.flatnonzero(moments == 0.0)
    if zero.size:
        raise DegenerateStatisticsError(layer, int(zero[0]))
    return 1.0 / np.sqrt(moments)


def batch_norm_forward(net: NetworkSpec, batch) -> np.ndarray:
    """Outputs of the batch-normalized computation on ``batch``.

    Every layer, head included, scales each pre-activation row by the inverse
    root of its batch second moment ``sum_i (W z_i + b)^2`` before the
    nonlinearity. No centering, no learned scale, no epsilon.
    """
    _check_bn_architecture(net)
    Z = np.asarray(batch, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        Zhat = Z @ layer.W.T + layer.b
        Zhat = Zhat * _moment_scale(Zhat, i)
        if isinstance(layer, Dense):
            Z = activate("relu", Zhat)
        elif isinstance(layer, SoftmaxHead):
            Z = softmax(Zhat)
        else:
            Z = Zhat
    return Z


def batch_norm_equivalent(net: NetworkSpec, batch) -> NetworkSpec:
    """Plain net reproducing :func:`batch_norm_forward` on ``batch``.

    Positive diagonal factors commute with ReLU, so each layer's batch-norm
    scale and row norms are pushed into the next layer's columns. Hidden
    weight matrices come out row normalized; the head keeps the explicit
    factor ``N W``.
    """
    _check_bn_architecture(net)
    Z = np.asarray(batch, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != net.input_dim:
        raise InvalidInputError(f"batch must have shape (m, {net.input_dim})")
    carry = np.ones(net.input_dim)
    layers = []
    for i, layer in enumerate(net.layers):
        Zhat = Z @ layer.W.T + layer.b
        n = _moment_scale(Zhat, i)
        V = layer.W * carry[None, :]
        if isinstance(layer, HEADS):
            layers.append(type(layer)(n[:, None] * V, n * layer.b))
            break
        r = np.linalg.norm(V, axis=1)
        zero = np.flatnonzero(r == 0.0)
        if zero.size:
            raise DegenerateRowError(i, int(zero[0]))
        layers.append(Dense(V / r[:, None], layer.b / r, "relu"))
        carry = n * r
        Z = activate("relu", Zhat * n)
    return NetworkSpec(tuple(layers), net.input_dim, net.num_classes)
