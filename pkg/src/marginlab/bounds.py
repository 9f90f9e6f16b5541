"""Covering numbers and robustness-based generalization-error bounds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from marginlab.linalg import InvalidInputError, frobenius_norm
from marginlab.margin import (
    NeighborhoodConfig,
    hull_points,
    local_jacobian_sup,
    scores,
    weight_norm_product,
)
from marginlab.network import NetworkSpec, jacobian_spectral_norms

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class CoveringModel:
    """Data model with a closed-form covering number.

    ``kind`` is ``"gmm"`` (``L`` Gaussians of rank ``<= k``), ``"k_sparse"``
    (``k``-sparse in a dictionary of ``L`` atoms) or ``"manifold"``
    (``C_M``-regular, ``k``-dimensional).
    """

    kind: str
    k: int
    L: int = 1
    C_M: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gmm", "k_sparse", "manifold"):
            raise InvalidInputError(f"unknown covering model {self.kind!r}")
        if self.k < 1:
            raise InvalidInputError("k must be at least 1")
        if self.L < 1:
            raise InvalidInputError("L must be at least 1")
        if self.kind == "k_sparse" and self.k > self.L:
            raise InvalidInputError("k-sparse model needs k <= L")
        if not self.C_M > 0:
            raise InvalidInputError("C_M must be positive")

    @classmethod
    def gmm(cls, L: int, k: int):
        return cls("gmm", k, L=L)

    @classmethod
    def k_sparse(cls, L: int, k: int):
        return cls("k_sparse", k, L=L)

    @classmethod
    def manifold(cls, C_M: float, k: int):
        return cls("manifold", k, C_M=C_M)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "L": self.L, "C_M": self.C_M}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(d["kind"], int(d["k"]), int(d.get("L", 1)), float(d.get("C_M", 1.0)))


def log_covering_number(model: CoveringModel, rho: float) -> float:
    if not rho > 0:
        raise InvalidInputError("covering radius must be positive")
    if model.kind == "manifold":
        return model.k * math.log(model.C_M / rho)
    base = model.k * math.log1p(2.0 / rho)
    if model.kind == "gmm":
        return math.log(model.L) + base
    log_binom = math.lgamma(model.L + 1) - math.lgamma(model.k + 1) - math.lgamma(model.L - model.k + 1)
    return log_binom + base


def covering_number(model: CoveringModel, rho: float) -> float:
    """``N(X; d, rho)``; may overflow to ``inf`` for large ``k``."""
    try:
        return math.exp(log_covering_number(model, rho))
    except OverflowError:
        return math.inf


def _check_delta(delta):
    if not 0 < delta < 1:
        raise InvalidInputError("delta must lie in (0, 1)")


def ge_bound_general(K: float, eps: float, M_loss: float, m: int, delta: float) -> float:
    """``eps + M sqrt((2 K log 2 + 2 log(1/delta)) / m)`` for a ``(K, eps)``-robust learner."""
    _check_delta(delta)
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    return eps + M_loss * math.sqrt((2.0 * K * LOG2 + 2.0 * math.log(1.0 / delta)) / m)


def large_margin_partitions(model: CoveringModel, num_classes: int, gamma: float) -> float:
    """Partition count ``N_Y * N(X; d, gamma / 2)`` of a margin-``gamma`` classifier."""
    return num_classes * covering_number(model, gamma / 2.0)


def _log_radical(log_K: float, m: int) -> float:
    return 0.5 * (math.log(2.0 * LOG2) + log_K - math.log(m))


def ge_bound_margin(
    model: CoveringModel,
    num_classes: int,
    gamma: float,
    m: int,
    delta: float = 0.5,
    include_confidence: bool = True,
) -> float:
    """GE bound of a classifier with margin ``gamma`` under ``model``.

    ``sqrt(2 log2 N_Y N(X; gamma/2) / m)`` plus, unless
    ``include_confidence`` is false, ``sqrt(2 log(1/delta) / m)``. Worked in
    log space so huge covering numbers do not overflow.
    """
    if not gamma > 0:
        raise InvalidInputError("margin must be positive")
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    log_K = math.log(num_classes) + log_covering_number(model, gamma / 2.0)
    lr = _log_radical(log_K, m)
    first = math.exp(lr) if lr < 700 else math.inf
    if not include_confidence:
        return first
    _check_delta(delta)
    return first + math.sqrt(2.0 * math.log(1.0 / delta) / m)


def ge_bound_manifold(
    num_classes: int,
    k: int,
    C_M: float,
    gamma: float,
    m: int,
    delta: float,
    include_confidence: bool = True,
) -> float:
    """``sqrt(log2 N_Y 2^(k+1) C_M^k / (gamma^k m)) + sqrt(2 log(1/delta) / m)``."""
    return ge_bound_margin(CoveringModel.manifold(C_M, k), num_classes, gamma, m, delta, include_confidence)


def rademacher_reference_bound(net: NetworkSpec, m: int) -> float:
    """Depth-exponential comparison quantity ``2^(L-1) prod ||W||_F / sqrt(m)``."""
    Ws = net.weight_matrices()
    return 2.0 ** (len(Ws) - 1) * math.prod(frobenius_norm(W) for W in Ws) / math.sqrt(m)


@dataclass
class ExpandedBound:
    variant: int
    numerator: float
    min_score: float
    ratio: float
    k: int
    C_M: float
    m: int
    bound_value: float
    attaining_sample: int
    applicable: bool = True
    offending: list = field(default_factory=list)

    @property
    def vacuous(self) -> bool:
        return self.applicable and self.bound_value > 1.0


@dataclass
class SupEstimates:
    """Sampled Jacobian sups shared by variants 1 and 2."""

    local: np.ndarray
    hull: float


def estimate_sups(net: NetworkSpec, X, y, neighborhood: NeighborhoodConfig = NeighborhoodConfig()) -> SupEstimates:
    """Per-sample local sups and the hull sup, with nested witness sets."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    o = scores(net, X, y, neighborhood.score_scale)
    p2 = weight_norm_product(net, "spectral")
    rng = np.random.default_rng(neighborhood.seed)
    hull = min(float(np.max(jacobian_spectral_norms(net, hull_points(X, neighborhood.hull_samples, rng)))), p2)
    local = np.full(len(o), np.nan)
    for i in range(len(o)):
        if o[i] > 0:
            cfg = NeighborhoodConfig(
                neighborhood.ball_samples, neighborhood.hull_samples, neighborhood.max_iters,
                neighborhood.rel_tol, neighborhood.seed + 1 + i, neighborhood.score_scale,
            )
            local[i], _ = local_jacobian_sup(net, X[i], o[i], o[i] / p2, cfg, cap=p2)
    if np.any(o > 0):
        hull = max(hull, float(np.nanmax(local)))
    return SupEstimates(local, hull)


def ge_bound_expanded(
    net: NetworkSpec,
    X,
    y,
    variant: int,
    covering: CoveringModel,
    m: int | None = None,
    delta: float = 0.5,
    sups: SupEstimates | None = None,
    include_confidence: bool = False,
    score_scale: str = "unit",
) -> ExpandedBound:
    """Expanded GE bound with a network-dependent numerator.

    ``gamma_b = min_i o(s_i) / numerator_i`` with numerator the local
    Jacobian sup (1), the hull sup (2), the spectral product (3) or the
    Frobenius product (4); the bound is ``ge_bound_margin`` at ``gamma_b``
    (for a manifold model, ``C/sqrt(m) max_i (C_M num_i / o_i)^(k/2)``).
    The confidence term is left out by default.
    """
    if variant not in (1, 2, 3, 4):
        raise InvalidInputError("variant must be 1, 2, 3 or 4")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    m = X.shape[0] if m is None else m
    o = scores(net, X, y, score_scale)
    bad = [int(i) for i in np.flatnonzero(o <= 0)]
    if bad:
        return ExpandedBound(variant, math.nan, float(o.min()), math.nan, covering.k, covering.C_M, m,
                             math.nan, -1, applicable=False, offending=bad)
    if variant in (1, 2) and sups is None:
        sups = estimate_sups(net, X, y)
    if variant == 1:
        num = sups.local
    elif variant == 2:
        num = np.full(len(o), sups.hull)
    elif variant == 3:
        num = np.full(len(o), weight_norm_product(net, "spectral"))
    else:
        num = np.full(len(o), weight_norm_product(net, "frobenius"))
    ratios = num / o
    i = int(np.argmax(ratios))
    gamma_b = 1.0 / ratios[i]
    value = ge_bound_margin(covering, net.num_classes, gamma_b, m, delta, include_confidence) if np.isfinite(gamma_b) else 0.0
    return ExpandedBound(variant, float(num[i]), float(o.min()), float(ratios[i]), covering.k, covering.C_M, m, value, i)


BOUND_FIELDS = ("variant", "numerator", "min_score", "k", "C_M", "m", "bound_value", "attaining_sample")


def bound_rows(bounds: list[ExpandedBound], rademacher: float | None = None) -> list[dict]:
    rows = []
    for b in bounds:
        rows.append({
            "variant": str(b.variant) if b.applicable else f"{b.variant} (inapplicable)",
            "numerator": b.numerator,
            "min_score": b.min_score,
            "k": b.k,
            "C_M": b.C_M,
            "m": b.m,
            "bound_value": b.bound_value,
            "attaining_sample": b.attaining_sample,
            "vacuous": b.vacuous,
            "offending": b.offending,
        })
    if rademacher is not None and bounds:
        b = bounds[0]
        rows.append({"variant": "rademacher", "numerator": math.nan, "min_score": math.nan, "k": b.k, "C_M": b.C_M,
                     "m": b.m, "bound_value": rademacher, "attaining_sample": -1, "vacuous": rademacher > 1.0,
                     "offending": []})
    return rows


def write_bound_tables(rows: list[dict], csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BOUND_FIELDS + ("vacuous",), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    with open(json_path, "w") as fh:
        json.dump(rows, fh, indent=2, default=float)
