"""Feed-forward and residual network engine.

A network is an immutable chain of layers acting on flat vectors. Every layer
knows its forward map and how to pull a stack of Jacobian rows back through
itself, which is all the Jacobian, margin and training code needs.

Batched internals take arrays of shape ``(batch, dim)``; Jacobian rows are
carried as ``(batch, rows, dim)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from marginlab.linalg import InvalidInputError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
POOL_KINDS = ("downsample", "max", "average")
FORMAT_NAME = "marginlab.network"
FORMAT_VERSION = 1


class DegenerateRowError(ValueError):
    def __init__(self, layer: int, row: int, what: str = "weight row"):
        super().__init__(f"layer {layer}: {what} {row} is zero")
        self.layer = layer
        self.row = row


class UnsupportedArchitectureError(ValueError):
    pass


# -- pointwise nonlinearities ------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return _sigmoid(x)
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x.copy()
    raise InvalidInputError(f"unknown activation {name!r}")


def activation_derivative(name: str, x: np.ndarray) -> np.ndarray:
    # ReLU derivative at exactly 0 is taken as 0.
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s)
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(x)
    raise InvalidInputError(f"unknown activation {name!r}")


def activation_second_derivative(name: str, x: np.ndarray) -> np.ndarray:
    if name in ("relu", "identity"):
        return np.zeros_like(x)
    if name == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s) * (1.0 - 2.0 * s)
    if name == "tanh":
        t = np.tanh(x)
        return -2.0 * t * (1.0 - t * t)
    raise InvalidInputError(f"unknown activation {name!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(zhat) -> np.ndarray:
    """Jacobian of the softmax function, ``diag(p) - p p^T``."""
    p = softmax(np.asarray(zhat, dtype=np.float64))
    return np.diag(p) - np.outer(p, p)


# -- layers --------------------------------------------------------------------


def _weights(W, b, name):
    W = np.array(W, dtype=np.float64, ndmin=2)
    b = np.zeros(W.shape[0]) if b is None else np.array(b, dtype=np.float64).reshape(-1)
    if W.ndim != 2:
        raise InvalidInputError(f"{name}: weight must be 2-D")
    if b.shape != (W.shape[0],):
        raise InvalidInputError(f"{name}: bias has {b.size} entries for {W.shape[0]} rows")
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise InvalidInputError(f"{name}: non-finite parameters")
    W.setflags(write=False)
    b.setflags(write=False)
    return W, b


@dataclass(frozen=True, eq=False)
class Dense:
    """``z = sigma(W z_prev + b)``."""

    W: np.ndarray
    b: np.ndarray | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        W, b = _weights(self.W, self.b, "dense")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True, eq=False)
class LinearHead:
    W: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        W, b = _weights(self.W, self.b, "linear_head")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True, eq=False)
class SoftmaxHead(LinearHead):
    pass


@dataclass(frozen=True, eq=False)
class Pooling:
    """Pooling over pairwise-disjoint index regions of the input."""

    kind: str
    regions: tuple
    in_dim: int
    _index: np.ndarray = field(init=False, repr=False)
    _mask: np.ndarray = field(init=False, repr=False)
    _matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise InvalidInputError(f"unknown pooling kind {self.kind!r}")
        regions = tuple(tuple(int(j) for j in r) for r in self.regions)
        if not regions or any(len(r) == 0 for r in regions):
            raise InvalidInputError("pooling regions must be non-empty")
        flat = [j for r in regions for j in r]
        if len(set(flat)) != len(flat):
            raise InvalidInputError("pooling regions overlap")
        if min(flat) < 0 or max(flat) >= self.in_dim:
            raise InvalidInputError("pooling region index out of range")
        width = max(len(r) for r in regions)
        index = np.zeros((len(regions), width), dtype=np.intp)
        mask = np.zeros((len(regions), width), dtype=bool)
        P = np.zeros((len(regions), self.in_dim))
        for i, r in enumerate(regions):
            index[i, : len(r)] = r
            mask[i, : len(r)] = True
            if self.kind == "downsample":
                P[i, r[0]] = 1.0
            else:
                P[i, list(r)] = 1.0 / len(r)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_mask", mask)
        object.__setattr__(self, "_matrix", P)

    @property
    def out_dim(self) -> int:
        return len(self.regions)

    def select(self, A: np.ndarray) -> np.ndarray:
        """Chosen input index per region for max pooling, shape ``(batch, regions)``.

        Largest magnitude wins; ties go to the earliest index in the region.
        """
        mags = np.where(self._mask, np.abs(A[:, self._index]), -1.0)
        pos = np.argmax(mags, axis=-1)
        return self._index[np.arange(self.out_dim), pos]

    def matrix(self, z: np.ndarray) -> np.ndarray:
        if self.kind != "max":
            return self._matrix.copy()
        sel = self.select(np.asarray(z, dtype=np.float64)[None, :])[0]
        P = np.zeros((self.out_dim, self.in_dim))
        P[np.arange(self.out_dim), sel] = 1.0
        return P


@dataclass(frozen=True, eq=False)
class Residual:
    """``z = z_prev + phi(z_prev)`` with ``phi`` a chain of dense layers."""

    inner: tuple

    def __post_init__(self):
        inner = tuple(self.inner)
        if not inner or not all(isinstance(l, Dense) for l in inner):
            raise InvalidInputError("residual block needs one or more dense layers")
        _check_chain(inner, inner[0].in_dim)
        if inner[-1].out_dim != inner[0].in_dim:
            raise InvalidInputError("residual block must preserve dimension")
        object.__setattr__(self, "inner", inner)

    @property
    def in_dim(self) -> int:
        return self.inner[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.in_dim


Layer = Union[Dense, LinearHead, SoftmaxHead, Pooling, Residual]
HEADS = (LinearHead, SoftmaxHead)


def _check_chain(layers, dim):
    for i, layer in enumerate(layers):
        if layer.in_dim != dim:
            raise InvalidInputError(f"layer {i} expects input dim {layer.in_dim}, got {dim}")
        dim = layer.out_dim
    return dim


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple
    input_dim: int | None = None
    num_classes: int | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidInputError("network has no layers")
        if not isinstance(layers[-1], HEADS):
            raise InvalidInputError("last layer must be a linear or softmax head")
        if any(isinstance(l, HEADS) for l in layers[:-1]):
            raise InvalidInputError("head layer before the end of the network")
        input_dim = layers[0].in_dim if self.input_dim is None else int(self.input_dim)
        out = _check_chain(layers, input_dim)
        if self.num_classes is not None and out != self.num_classes:
            raise InvalidInputError(f"head has {out} rows, expected {self.num_classes}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dim", input_dim)
        object.__setattr__(self, "num_classes", out)

    @property
    def head(self):
        return self.layers[-1]

    def weight_matrices(self) -> list[np.ndarray]:
        """All weight matrices, residual inner layers included, in order."""
        return [p for p, is_w in self._named_params() if is_w]

    def parameters(self) -> list[np.ndarray]:
        return [p for p, _ in self._named_params()]

    def weight_mask(self) -> list[bool]:
        return [is_w for _, is_w in self._named_params()]

    def _named_params(self):
        for layer in self.layers:
            for sub in _dense_like(layer):
                yield sub.W, True
                yield sub.b, False

    def with_parameters(self, params: Sequence[np.ndarray]) -> "NetworkSpec":
        it = iter(params)

        def take(layer):
            if isinstance(layer, Residual):
                return Residual(tuple(take(l) for l in layer.inner))
            if isinstance(layer, Pooling):
                return layer
            W, b = next(it), next(it)
            if isinstance(layer, Dense):
                return Dense(W, b, layer.activation)
            return type(layer)(W, b)

        layers = tuple(take(l) for l in self.layers)
        if next(it, None) is not None:
            raise InvalidInputError("too many parameter arrays")
        return NetworkSpec(layers, self.input_dim, self.num_classes)

    def __call__(self, x):
        return predict(self, x)


def _dense_like(layer) -> Iterator:
    if isinstance(layer, Residual):
        yield from layer.inner
    elif not isinstance(layer, Pooling):
        yield layer


# -- forward pass --------------------------------------------------------------


@dataclass
class LayerCache:
    inp: np.ndarray
    out: np.ndarray
    pre: np.ndarray | None = None
    sel: np.ndarray | None = None
    inner: list | None = None


def forward_layer(layer, A: np.ndarray) -> LayerCache:
    if isinstance(layer, Dense):
        Z = A @ layer.W.T + layer.b
        return LayerCache(A, activate(layer.activation, Z), pre=Z)
    if isinstance(layer, SoftmaxHead):
        Z = A @ layer.W.T + layer.b
        return LayerCache(A, softmax(Z), pre=Z)
    if isinstance(layer, LinearHead):
        Z = A @ layer.W.T + layer.b
        return LayerCache(A, Z, pre=Z)
    if isinstance(layer, Pooling):
        if layer.kind == "max":
            sel = layer.select(A)
            return LayerCache(A, np.take_along_axis(A, sel, axis=1), sel=sel)
        return LayerCache(A, A @ layer._matrix.T)
    if isinstance(layer, Residual):
        caches, H = [], A
        for sub in layer.inner:
            c = forward_layer(sub, H)
            caches.append(c)
            H = c.out
        return LayerCache(A, A + H, inner=caches)
    raise InvalidInputError(f"unknown layer type {type(layer).__name__}")


def forward_batch(net: NetworkSpec, X) -> list[LayerCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise InvalidInputError(f"expected inputs of dim {net.input_dim}, got shape {X.shape}")
    caches, A = [], X
    for layer in net.layers:
        c = forward_layer(layer, A)
        caches.append(c)
        A = c.out
    return caches


def predict(net: NetworkSpec, X) -> np.ndarray:
    """Network outputs ``f(x)``; accepts one vector or a batch of rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return forward_batch(net, X[None, :])[-1].out[0]
    return forward_batch(net, X)[-1].out


def classify(net: NetworkSpec, X) -> np.ndarray:
    return np.argmax(predict(net, X), axis=-1)


@dataclass
class ForwardTrace:
    activations: list
    preactivations: list
    pool_selections: dict

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def forward(net: NetworkSpec, x) -> ForwardTrace:
    """Run one input through the net, recording every intermediate value.

    ``activations[l]`` is the output of layer ``l`` (``activations[0]`` is the
    input); ``preactivations[l]`` is ``W z + b`` for weight layers and
    ``None`` otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise InvalidInputError(f"expected input of dim {net.input_dim}, got shape {x.shape}")
    caches = forward_batch(net, x[None, :])
    acts = [x.copy()] + [c.out[0] for c in caches]
    pres = [None] + [None if c.pre is None else c.pre[0] for c in caches]
    sels = {i + 1: c.sel[0] for i, c in enumerate(caches) if c.sel is not None}
    return ForwardTrace(acts, pres, sels)


# -- Jacobians -----------------------------------------------------------------


def layer_jacobian(layer, z) -> np.ndarray:
    """Exact Jacobian of one layer's map at input ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (layer.in_dim,):
        raise InvalidInputError(f"layer expects input dim {layer.in_dim}, got shape {z.shape}")
    if isinstance(layer, Dense):
        zhat = layer.W @ z + layer.b
        return activation_derivative(layer.activation, zhat)[:, None] * layer.W
    if isinstance(layer, SoftmaxHead):
        return softmax_jacobian(layer.W @ z + layer.b) @ layer.W
    if isinstance(layer, LinearHead):
        return layer.W.copy()
    if isinstance(layer, Pooling):
        return layer.matrix(z)
    if isinstance(layer, Residual):
        J, h = np.eye(layer.in_dim), z
        for sub in layer.inner:
            J = layer_jacobian(sub, h) @ J
            h = forward_layer(sub, h[None, :]).out[0]
        return np.eye(layer.in_dim) + J
    raise InvalidInputError(f"unknown layer type {type(layer).__name__}")


def network_jacobian(net: NetworkSpec, x) -> np.ndarray:
    """``df/dx`` as the product of per-layer Jacobians along the trace."""
    trace = forward(net, x)
    J = np.eye(net.input_dim)
    for layer, z in zip(net.layers, trace.activations[:-1]):
        J = layer_jacobian(layer, z) @ J
    return J


def pullback_rows(layer, cache: LayerCache, R: np.ndarray) -> np.ndarray:
    """Map rows ``R`` of shape ``(batch, k, out_dim)`` to ``R @ dlayer/dinput``."""
    if isinstance(layer, Dense):
        s = activation_derivative(layer.activation, cache.pre)
        return (R * s[:, None, :]) @ layer.W
    if isinstance(layer, SoftmaxHead):
        p = cache.out
        RS = R * p[:, None, :] - (R @ p[:, :, None]) * p[:, None, :]
        return RS @ layer.W
    if isinstance(layer, LinearHead):
        return R @ layer.W
    if isinstance(layer, Pooling):
        if layer.kind == "average":
            return R @ layer._matrix
        B, k, _ = R.shape
        out = np.zeros((B, k, layer.in_dim))
        if layer.kind == "downsample":
            out[:, :, layer._index[:, 0]] = R
        else:
            out[np.arange(B)[:, None], :, cache.sel] = R.transpose(0, 2, 1)
        return out
    if isinstance(layer, Residual):
        H = R
        for sub, c in zip(reversed(layer.inner), reversed(cache.inner)):
            H = pullback_rows(sub, c, H)
        return R + H
    raise InvalidInputError(f"unknown layer type {type(layer).__name__}")


def batch_jacobians(net: NetworkSpec, X, rows=None) -> np.ndarray:
    """Jacobians for a batch of inputs, shape ``(batch, N_Y, input_dim)``.

    ``rows`` optionally selects output combinations: an array of shape
    ``(batch, k, N_Y)`` whose rows are pulled back instead of the identity.
    """
    caches = forward_batch(net, X)
    B = caches[0].inp.shape[0]
    if rows is None:
        R = np.broadcast_to(np.eye(net.num_classes), (B, net.num_classes, net.num_classes)).copy()
    else:
        R = np.asarray(rows, dtype=np.float64)
    for layer, c in zip(reversed(net.layers), reversed(caches)):
        R = pullback_rows(layer, c, R)
    return R


def jacobian_spectral_norms(net: NetworkSpec, X) -> np.ndarray:
    """``||J(x)||_2`` for each row of ``X`` (exact, via the small Gram matrix)."""
    J = batch_jacobians(net, np.atleast_2d(X))
    G = J @ J.transpose(0, 2, 1)
    return np.sqrt(np.maximum(np.linalg.eigvalsh(G)[:, -1], 0.0))


def jacobian_frobenius_norms(net: NetworkSpec, X) -> np.ndarray:
    J = batch_jacobians(net, np.atleast_2d(X))
    return np.sqrt(np.sum(J * J, axis=(1, 2)))


def quadrature_weights(steps: int, rule: str = "simpson") -> np.ndarray:
    """Weights on ``steps + 1`` equispaced nodes of ``[0, 1]``.

    ``"trapezoid"`` is the composite trapezoid rule. ``"simpson"`` is
    composite Simpson (one Richardson step above trapezoid on the same
    nodes); odd ``steps`` close with a 3/8 rule on the last three panels.
    """
    if steps < 2:
        raise InvalidInputError("steps must be at least 2")
    h = 1.0 / steps
    if rule == "trapezoid":
        w = np.full(steps + 1, h)
        w[0] = w[-1] = 0.5 * h
        return w
    if rule != "simpson":
        raise InvalidInputError(f"unknown quadrature rule {rule!r}")
    w = np.zeros(steps + 1)
    even = steps if steps % 2 == 0 else steps - 3
    if even:
        w[: even + 1 : 2] += 2.0 * h / 3.0
        w[1:even:2] += 4.0 * h / 3.0
        w[0] -= h / 3.0
        w[even] -= h / 3.0
    if even != steps:
        w[even : even + 4] += 3.0 * h / 8.0 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


def average_jacobian(net: NetworkSpec, x, x2, steps: int = 64, rule: str = "simpson") -> np.ndarray:
    """Mean Jacobian on the segment from ``x`` to ``x2``.

    Quadrature over ``t in [0, 1]`` with ``steps`` panels; see
    :func:`quadrature_weights` for ``rule``.
    """
    w = quadrature_weights(steps, rule)
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    t = np.linspace(0.0, 1.0, steps + 1)
    pts = x[None, :] + t[:, None] * (x2 - x)[None, :]
    return np.tensordot(w, batch_jacobians(net, pts), axes=1)


# -- residual sub-network expansion -----------------------------------------------


def resnet_jacobian_expansion(net: NetworkSpec, x) -> np.ndarray:
    """Jacobian of a residual net as a sum over all its sub-networks.

    The net must be residual blocks followed by a head. The product of
    ``(I + J_l)`` factors is expanded into ``sum over subsets S`` of the
    ordered products ``J_{l_k} ... J_{l_1}``; the head Jacobian multiplies
    the sum.
    """
    blocks = net.layers[:-1]
    if not all(isinstance(b, Residual) for b in blocks):
        raise UnsupportedArchitectureError("expansion needs residual blocks followed by a head")
    if len(blocks) > 16:
        raise UnsupportedArchitectureError("too many blocks for explicit expansion")
    trace = forward(net, x)
    inner = [layer_jacobian(b, z) - np.eye(b.in_dim) for b, z in zip(blocks, trace.activations)]
    n = net.input_dim
    total = np.zeros((n, n))
    for r in range(len(inner) + 1):
        for subset in itertools.combinations(range(len(inner)), r):
            term = np.eye(n)
            for l in subset:
                term = inner[l] @ term
            total += term
    head = layer_jacobian(net.head, trace.activations[-2])
    return head @ total


# -- construction helpers --------------------------------------------------------


def init_mlp(
    widths: Sequence[int],
    activation: str = "relu",
    head: str = "softmax",
    rng: np.random.Generator | int | None = None,
) -> NetworkSpec:
    """He-initialized fully connected net; ``widths`` runs input -> classes."""
    rng = np.random.default_rng(rng)
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        W = rng.standard_normal((b, a)) * np.sqrt(2.0 / a)
        bias = np.zeros(b)
        if i == len(widths) - 2:
            layers.append(SoftmaxHead(W, bias) if head == "softmax" else LinearHead(W, bias))
        else:
            layers.append(Dense(W, bias, activation))
    return NetworkSpec(tuple(layers))


def pool_regions_2d(channels: int, height: int, width: int, size: int) -> tuple:
    """Non-overlapping ``size x size`` regions over a CHW-flattened image."""
    regions = []
    for c in range(channels):
        for i in range(0, height - size + 1, size):
            for j in range(0, width - size + 1, size):
                regions.append(
                    tuple(c * height * width + (i + di) * width + (j + dj) for di in range(size) for dj in range(size))
                )
    return tuple(regions)


# -- serialization -------------------------------------------------------------


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Residual):
        return {"kind": "residual", "inner": [_layer_to_dict(l) for l in layer.inner]}
    if isinstance(layer, Pooling):
        return {"kind": "pooling", "pool": layer.kind, "in_dim": layer.in_dim, "regions": [list(r) for r in layer.regions]}
    d = {
        "kind": "dense" if isinstance(layer, Dense) else "softmax_head" if isinstance(layer, SoftmaxHead) else "linear_head",
        "shape": list(layer.W.shape),
        "weight": layer.W.reshape(-1).tolist(),
        "bias": layer.b.tolist(),
    }
    if isinstance(layer, Dense):
        d["activation"] = layer.activation
    return d


def _layer_from_dict(d: dict):
    kind = d["kind"]
    if kind == "residual":
        return Residual(tuple(_layer_from_dict(l) for l in d["inner"]))
    if kind == "pooling":
        return Pooling(d["pool"], tuple(tuple(r) for r in d["regions"]), int(d["in_dim"]))
    W = np.array(d["weight"], dtype=np.float64).reshape(d["shape"])
    b = np.array(d["bias"], dtype=np.float64)
    if kind == "dense":
        return Dense(W, b, d.get("activation", "relu"))
    if kind == "softmax_head":
        return SoftmaxHead(W, b)
    if kind == "linear_head":
        return LinearHead(W, b)
    raise InvalidInputError(f"unknown layer kind {kind!r}")


def network_to_dict(net: NetworkSpec) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
        "layers": [_layer_to_dict(l) for l in net.layers],
    }


def network_from_dict(d: dict) -> NetworkSpec:
    if d.get("format") != FORMAT_NAME:
        raise InvalidInputError("not a marginlab network document")
    if d.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported network format version {d.get('version')}")
    layers = tuple(_layer_from_dict(l) for l in d["layers"])
    return NetworkSpec(layers, d["input_dim"], d["num_classes"])


def dumps(net: NetworkSpec) -> str:
    return json.dumps(network_to_dict(net))


def loads(text: str) -> NetworkSpec:
    return network_from_dict(json.loads(text))


def save(net: NetworkSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(net))


def load(path) -> NetworkSpec:
    with open(path) as fh:
        return loads(fh.read())


# -- random nets and kink detection ------------------------------------------------


def random_network(
    rng: np.random.Generator | int | None,
    input_dim: int,
    widths: Sequence[int],
    num_classes: int,
    activation: str = "relu",
    head: str = "softmax",
    pool_after: int | None = None,
    pool_kind: str = "max",
    residual_at: int | None = None,
    weight_scale: float = 1.0,
) -> NetworkSpec:
    """Gaussian-weight net for property tests.

    ``widths`` lists the hidden dense widths. ``pool_after`` inserts a pooling
    layer (pairs of adjacent units) after that hidden layer; ``residual_at``
    inserts a two-layer residual block after that hidden layer.
    """
    rng = np.random.default_rng(rng)
    layers, dim = [], input_dim
    for i, w in enumerate(widths):
        W = rng.standard_normal((w, dim)) * weight_scale / np.sqrt(dim)
        layers.append(Dense(W, 0.1 * rng.standard_normal(w), activation))
        dim = w
        if residual_at == i:
            mid = max(2, dim // 2)
            inner = (
                Dense(rng.standard_normal((mid, dim)) * 0.5 / np.sqrt(dim), 0.1 * rng.standard_normal(mid), activation),
                Dense(rng.standard_normal((dim, mid)) * 0.5 / np.sqrt(mid), 0.1 * rng.standard_normal(dim), activation),
            )
            layers.append(Residual(inner))
        if pool_after == i and dim >= 2:
            regions = tuple((j, j + 1) for j in range(0, dim - 1, 2))
            layers.append(Pooling(pool_kind, regions, dim))
            dim = len(regions)
    W = rng.standard_normal((num_classes, dim)) * weight_scale / np.sqrt(dim)
    b = 0.1 * rng.standard_normal(num_classes)
    layers.append(SoftmaxHead(W, b) if head == "softmax" else LinearHead(W, b))
    return NetworkSpec(tuple(layers))


def switching_distance(net: NetworkSpec, X) -> np.ndarray:
    """Per-sample distance (in pre-activation units) to the nearest kink.

    Covers ReLU pre-activations at 0 and max-pool ties between the two largest
    magnitudes in a region; ``inf`` for nets without either.
    """
    caches = forward_batch(net, np.atleast_2d(X))
    B = caches[0].inp.shape[0]
    out = np.full(B, np.inf)

    def visit(layer, c):
        nonlocal out
        if isinstance(layer, Dense) and layer.activation == "relu":
            out = np.minimum(out, np.min(np.abs(c.pre), axis=1))
        elif isinstance(layer, Pooling) and layer.kind == "max" and layer._index.shape[1] > 1:
            mags = np.where(layer._mask, np.abs(c.inp[:, layer._index]), -np.inf)
            top = np.sort(mags, axis=-1)[:, :, -2:]
            gap = top[:, :, 1] - top[:, :, 0]
            out = np.minimum(out, np.min(gap, axis=1))
        elif isinstance(layer, Residual):
            for sub, sc in zip(layer.inner, c.inner):
                visit(sub, sc)

    for layer, c in zip(net.layers, caches):
        visit(layer, c)
    return out
