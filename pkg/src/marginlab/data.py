"""Synthetic data generators and binary dataset formats."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from marginlab.bounds import CoveringModel
from marginlab.linalg import InvalidInputError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32
CONTAINER_MAGIC = b"MLDS"
CONTAINER_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)
    covering: CoveringModel | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise InvalidInputError("dataset needs an (m, d) input array and m labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.num_classes, dict(self.provenance), self.covering)

    def split(self, n_first: int, rng=None) -> tuple["Dataset", "Dataset"]:
        """Random split into ``n_first`` samples and the rest."""
        order = np.random.default_rng(rng).permutation(len(self))
        return self.subset(order[:n_first]), self.subset(order[n_first:])


# -- Gaussian mixtures ---------------------------------------------------------


@dataclass(frozen=True)
class GmmComponent:
    mean: tuple
    factor: tuple  # rows of an (ambient x rank) matrix
    label: int


@dataclass(frozen=True)
class GmmSpec:
    components: tuple
    k: int
    seed: int = 0

    def __post_init__(self):
        if not self.components:
            raise InvalidInputError("GMM needs at least one component")
        dims = set()
        for i, c in enumerate(self.components):
            F = np.asarray(c.factor, dtype=np.float64)
            mean = np.asarray(c.mean, dtype=np.float64)
            if F.ndim != 2 or F.shape[0] != mean.size:
                raise InvalidInputError(f"component {i}: factor must be ambient x rank")
            if F.shape[1] > self.k:
                raise InvalidInputError(f"component {i}: factor has {F.shape[1]} columns, rank limit k={self.k}")
            dims.add(mean.size)
        if len(dims) != 1:
            raise InvalidInputError("components have different ambient dimensions")

    @property
    def num_classes(self) -> int:
        return max(c.label for c in self.components) + 1

    def covering(self) -> CoveringModel:
        return CoveringModel.gmm(len(self.components), self.k)

    def to_dict(self) -> dict:
        return {
            "kind": "gmm",
            "k": self.k,
            "seed": self.seed,
            "components": [
                {"mean": list(c.mean), "factor": [list(r) for r in c.factor], "label": c.label} for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSpec":
        comps = tuple(
            GmmComponent(tuple(c["mean"]), tuple(tuple(r) for r in c["factor"]), int(c["label"])) for c in d["components"]
        )
        return cls(comps, int(d["k"]), int(d.get("seed", 0)))


def sample_gmm(spec: GmmSpec, m: int, seed: int | None = None) -> Dataset:
    """``m`` draws: uniform component, ``x = mean + factor @ N(0, I_rank)``."""
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    which = rng.integers(0, len(spec.components), size=m)
    d = len(spec.components[0].mean)
    X = np.empty((m, d))
    y = np.empty(m, dtype=np.int64)
    for i, c in enumerate(spec.components):
        idx = np.flatnonzero(which == i)
        F = np.asarray(c.factor, dtype=np.float64).reshape(d, -1)
        Z = rng.standard_normal((idx.size, F.shape[1]))
        X[idx] = np.asarray(c.mean) + Z @ F.T
        y[idx] = c.label
    return Dataset(X, y, spec.num_classes, {"generator": spec.to_dict(), "m": m}, spec.covering())


def two_gmm(dim: int, k: int, separation: float, spread: float = 1.0, seed: int = 0, shared_factor: bool = False) -> GmmSpec:
    """Two labelled rank-``k`` Gaussians with means ``+-separation/2`` on a random axis."""
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(dim)
    axis /= np.linalg.norm(axis)
    comps = []
    shared = rng.standard_normal((dim, k)) * spread / math.sqrt(k)
    for label, sign in ((0, -1.0), (1, 1.0)):
        F = shared if shared_factor else rng.standard_normal((dim, k)) * spread / math.sqrt(k)
        comps.append(GmmComponent(tuple(sign * 0.5 * separation * axis), tuple(map(tuple, F)), label))
    return GmmSpec(tuple(comps), k, seed)


# -- manifolds -------------------------------------------------------------------


def circle_chart(radius: float = 1.0, center=(0.0, 0.0)) -> Callable:
    cx, cy = center

    def chart(t):
        a = 2.0 * np.pi * t[:, 0]
        return np.stack([cx + radius * np.cos(a), cy + radius * np.sin(a)], axis=1)

    chart.k = 1
    return chart


def torus_chart(r1: float = 1.0, r2: float = 1.0) -> Callable:
    """Product of two circles in R^4 (a flat torus)."""

    def chart(t):
        a, b = 2.0 * np.pi * t[:, 0], 2.0 * np.pi * t[:, 1]
        return np.stack([r1 * np.cos(a), r1 * np.sin(a), r2 * np.cos(b), r2 * np.sin(b)], axis=1)

    chart.k = 2
    return chart


def bump_patch_chart(k: int, ambient: int, height: float = 0.5, seed: int = 0) -> Callable:
    """``k``-dim affine patch in R^ambient lifted by a smooth bump along a normal."""
    if ambient <= k:
        raise InvalidInputError("ambient dimension must exceed k")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((ambient, k + 1)))
    basis, normal = Q[:, :k], Q[:, k]

    def chart(t):
        u = 2.0 * t - 1.0
        bump = height * np.exp(-np.sum(u * u, axis=1) / 0.5)
        return u @ basis.T + bump[:, None] * normal[None, :]

    chart.k = k
    return chart


@dataclass
class ManifoldSpec:
    chart: Callable
    k: int
    label_rule: Callable
    C_M: float
    num_classes: int = 2
    seed: int = 0
    stratified: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("k must be at least 1")
        if not self.C_M > 0:
            raise InvalidInputError("C_M must be positive")


def sample_manifold(spec: ManifoldSpec, m: int, seed: int | None = None) -> Dataset:
    """``m`` chart images of uniform parameters (or a stratified grid for ``k = 1``)."""
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.stratified and spec.k == 1:
        t = (np.arange(m) / m)[:, None]
    else:
        t = rng.random((m, spec.k))
    try:
        X = np.asarray(spec.chart(t), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - report any chart failure uniformly
        raise InvalidInputError(f"chart evaluation failed: {exc}") from exc
    if X.shape[0] != m or not np.all(np.isfinite(X)):
        raise InvalidInputError("chart returned malformed points")
    y = np.asarray(spec.label_rule(X, t), dtype=np.int64)
    return Dataset(X, y, spec.num_classes, {"generator": spec.name, "m": m, "seed": spec.seed},
                   CoveringModel.manifold(spec.C_M, spec.k))


def concentric_circles(radii=(1.0, 2.0), C_M: float = 4.0 * math.pi, seed: int = 0) -> ManifoldSpec:
    """Union of circles; the label is the index of the circle a point lies on."""
    radii = tuple(float(r) for r in radii)
    n = len(radii)

    def chart(t):
        which = np.minimum((t[:, 0] * n).astype(int), n - 1)
        s = t[:, 0] * n - which
        r = np.asarray(radii)[which]
        a = 2.0 * np.pi * s
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    def rule(X, t):
        rad = np.linalg.norm(X, axis=1)
        return np.argmin(np.abs(rad[:, None] - np.asarray(radii)[None, :]), axis=1)

    return ManifoldSpec(chart, 1, rule, C_M, n, seed, name=f"circles{radii}")


# -- IDX / CIFAR-10 ----------------------------------------------------------------


def load_idx(path, scale: bool = True) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (MNIST images or labels).

    Image files (magic ``0x803``) are scaled to ``[0, 1]`` unless ``scale``
    is false; label files (``0x801``) come back as integers.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("truncated magic number", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + math.prod(dims)
    if len(raw) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after payload", need)
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC or not scale:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise InvalidInputError("IDX writer expects uint8 data")
    magic = IDX_LABELS_MAGIC if a.ndim == 1 else IDX_IMAGES_MAGIC
    if a.ndim not in (1, 3):
        raise InvalidInputError("IDX writer supports 1-D labels or 3-D image stacks")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_mnist(images_path, labels_path) -> Dataset:
    X = load_idx(images_path)
    y = load_idx(labels_path)
    if X.shape[0] != y.shape[0]:
        raise InvalidInputError("image and label counts differ")
    return Dataset(X.reshape(X.shape[0], -1), y, 10, {"images": str(images_path), "labels": str(labels_path)})


def load_cifar10_bin(path, standardize: bool = False) -> Dataset:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.

    Pixels keep the file's channel-plane, row-major order and are scaled to
    ``[0, 1]``. ``standardize`` then rescales each channel to zero mean and
    unit standard deviation over the file.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"length {len(raw)} is not a multiple of {CIFAR_RECORD}", len(raw) - len(raw) % CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    y = rec[:, 0].astype(np.int64)
    if y.max() > 9:
        bad = int(np.argmax(y > 9))
        raise FormatError(f"label {y[bad]} out of range", bad * CIFAR_RECORD)
    X = rec[:, 1:].astype(np.float64) / 255.0
    if standardize:
        X = standardize_channels(X, 3)
    return Dataset(X, y, 10, {"file": str(path), "standardized": standardize})


def standardize_channels(X, channels: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    planes = X.reshape(X.shape[0], channels, -1)
    mean = planes.mean(axis=(0, 2), keepdims=True)
    std = planes.std(axis=(0, 2), keepdims=True)
    std[std == 0] = 1.0
    return ((planes - mean) / std).reshape(X.shape)


# -- dataset container ---------------------------------------------------------------

_HEADER = struct.Struct("<4sIQQI")


def save_dataset(ds: Dataset, path, sidecar: bool = True) -> None:
    """Binary container: header, row-major float64 inputs, int32 labels.

    With ``sidecar`` a ``<path>.json`` file stores provenance and the
    covering model.
    """
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, ds.X.shape[0], ds.X.shape[1], ds.num_classes))
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.y, dtype="<i4").tobytes())
    if sidecar:
        meta = {
            "provenance": ds.provenance,
            "covering": ds.covering.to_dict() if ds.covering else None,
            "fingerprint": ds.fingerprint(),
        }
        with open(f"{path}.json", "w") as fh:
            json.dump(meta, fh, indent=2, default=str)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated container header", len(raw))
    magic, version, m, d, k = _HEADER.unpack_from(raw)
    if magic != CONTAINER_MAGIC:
        raise FormatError("not a marginlab dataset container", 0)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    need = _HEADER.size + 8 * m * d + 4 * m
    if len(raw) != need:
        raise FormatError(f"expected {need} bytes, got {len(raw)}", min(len(raw), need))
    X = np.frombuffer(raw, dtype="<f8", count=m * d, offset=_HEADER.size).reshape(m, d).astype(np.float64)
    y = np.frombuffer(raw, dtype="<i4", count=m, offset=_HEADER.size + 8 * m * d).astype(np.int64)
    covering, provenance = None, {"file": str(path)}
    try:
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        provenance = meta.get("provenance") or provenance
        if meta.get("covering"):
            covering = CoveringModel.from_dict(meta["covering"])
    except FileNotFoundError:
        pass
    return Dataset(X, y, int(k), provenance, covering)
