"""Classification scores, margin lower bounds and empirical margin search.

Labels are 0-based class indices throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict

import numpy as np

from marginlab.linalg import InvalidInputError, frobenius_norm, spectral_norm
from marginlab.network import (
    NetworkSpec,
    Pooling,
    Residual,
    batch_jacobians,
    classify,
    jacobian_spectral_norms,
    predict,
)

SCORE_SCALES = {"unit": 1.0 / math.sqrt(2.0), "sqrt2": math.sqrt(2.0)}


def _scale(name: str) -> float:
    try:
        return SCORE_SCALES[name]
    except KeyError:
        raise InvalidInputError(f"unknown score scale {name!r}") from None


def output_scores(F, y, scale: str = "unit") -> np.ndarray:
    """``min_{j != y} c (f_y - f_j)`` for rows of network outputs ``F``.

    ``scale="unit"`` uses ``c = 1/sqrt(2)`` so the class-difference
    directions have unit norm; ``"sqrt2"`` uses ``c = sqrt(2)``.
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    K = F.shape[1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise InvalidInputError(f"label out of range [0, {K})")
    rows = np.arange(F.shape[0])
    diff = F[rows, y][:, None] - F
    diff[rows, y] = np.inf
    return _scale(scale) * diff.min(axis=1)


def score(net: NetworkSpec, x, y: int, scale: str = "unit") -> float:
    return float(output_scores(predict(net, x)[None, :], [y], scale)[0])


def scores(net: NetworkSpec, X, y, scale: str = "unit") -> np.ndarray:
    return output_scores(predict(net, X), y, scale)


def weight_norm_product(net: NetworkSpec, kind: str = "spectral") -> float:
    """Product of per-layer weight norms bounding ``sup ||J||_2``.

    Pooling layers contribute 1. A residual block contributes
    ``1 + prod(inner norms)`` since its Jacobian is ``I + J_inner``.
    """
    norm = spectral_norm if kind == "spectral" else frobenius_norm
    if kind not in ("spectral", "frobenius"):
        raise InvalidInputError(f"unknown norm kind {kind!r}")
    total = 1.0
    for layer in net.layers:
        if isinstance(layer, Pooling):
            continue
        if isinstance(layer, Residual):
            total *= 1.0 + math.prod(norm(l.W) for l in layer.inner)
        else:
            total *= norm(layer.W)
    return total


@dataclass(frozen=True)
class NeighborhoodConfig:
    """Sampling budget for the two sup-of-Jacobian estimates."""

    ball_samples: int = 64
    hull_samples: int = 256
    max_iters: int = 10
    rel_tol: float = 1e-3
    seed: int = 0
    score_scale: str = "unit"


@dataclass(frozen=True)
class SearchConfig:
    """Directional boundary search for the empirical margin."""

    directions: int = 64
    scan_steps: int = 64
    max_radius: float | None = None
    rel_tol: float = 1e-6
    toward_others: bool = True
    gradient_directions: bool = True
    seed: int = 0


@dataclass
class MarginReport:
    score: float
    gamma1_hat: float
    gamma2_hat: float
    gamma3: float
    gamma4: float
    empirical_margin_ub: float
    neighborhood_samples: int
    applicable: bool = True
    sup_local: float = math.nan
    sup_hull: float = math.nan


def _unit_ball(rng, k, d):
    u = rng.standard_normal((k, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * rng.random(k)[:, None] ** (1.0 / d)


def local_jacobian_sup(net: NetworkSpec, x, o: float, start_radius: float, cfg: NeighborhoodConfig, cap=np.inf):
    """Fixed-point estimate of the sup of ``||J||_2`` over the margin ball.

    The ball radius is the margin itself, so iterate ``r <- o / sup(r)``
    from ``r = start_radius``. Returns ``(sup, witnesses)``.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    unit = np.vstack([np.zeros(x.size), _unit_ball(rng, cfg.ball_samples, x.size)])
    r = start_radius
    sup, pts = 0.0, x[None, :]
    for _ in range(cfg.max_iters):
        pts = x[None, :] + r * unit
        sup = min(float(np.max(jacobian_spectral_norms(net, pts))), cap)
        if sup <= 0.0:
            break
        r_new = o / sup
        done = abs(r_new - r) <= cfg.rel_tol * max(r, 1e-300)
        r = r_new
        if done:
            break
    return sup, pts


def hull_points(X, k: int, rng) -> np.ndarray:
    """Dataset points plus ``k`` random convex combinations of them."""
    X = np.asarray(X, dtype=np.float64)
    w = rng.dirichlet(np.full(X.shape[0], 0.5), size=k) if k else np.zeros((0, X.shape[0]))
    return np.vstack([X, w @ X])


def margin_reports(
    net: NetworkSpec,
    X,
    y,
    hull_data=None,
    neighborhood: NeighborhoodConfig = NeighborhoodConfig(),
    search: SearchConfig | None = SearchConfig(),
    reference=None,
    index_offset: int = 0,
) -> list[MarginReport]:
    """Margin bounds for every sample ``(X[i], y[i])``.

    ``gamma3``/``gamma4`` divide the score by the spectral/Frobenius weight
    products and are certified. ``gamma1_hat``/``gamma2_hat`` use sampled
    Jacobian sups and are diagnostic; the hull witness set contains every
    ball witness and all sups are capped by the spectral product, so
    ``gamma1_hat >= gamma2_hat >= gamma3`` holds by construction.
    ``reference`` (defaults to ``(X, y)``) feeds the empirical search.
    ``index_offset`` shifts the per-sample seeds so a chunk of a larger set
    reproduces the serial run.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    hull_data = X if hull_data is None else np.atleast_2d(hull_data)
    o = scores(net, X, y, neighborhood.score_scale)
    p2 = weight_norm_product(net, "spectral")
    pf = weight_norm_product(net, "frobenius")
    rng = np.random.default_rng(neighborhood.seed)
    hull = hull_points(hull_data, neighborhood.hull_samples, rng)
    sup_hull = min(float(np.max(jacobian_spectral_norms(net, hull))), p2)

    local = np.full(len(y), math.nan)
    for i in range(len(y)):
        if o[i] > 0:
            cfg = NeighborhoodConfig(**{**asdict(neighborhood), "seed": neighborhood.seed + 1 + index_offset + i})
            local[i], _ = local_jacobian_sup(net, X[i], o[i], o[i] / p2, cfg, cap=p2)
    if np.any(o > 0):
        sup_hull = max(sup_hull, float(np.nanmax(local)))

    if reference is None:
        reference = (X, y)
    reports = []
    for i in range(len(y)):
        emp = empirical_margin(net, X[i], int(y[i]), search, reference) if search is not None else math.nan
        if o[i] <= 0:
            reports.append(MarginReport(float(o[i]), math.nan, math.nan, math.nan, math.nan, emp, 0, applicable=False))
            continue
        reports.append(
            MarginReport(
                score=float(o[i]),
                gamma1_hat=_ratio(o[i], local[i]),
                gamma2_hat=_ratio(o[i], sup_hull),
                gamma3=float(o[i] / p2),
                gamma4=float(o[i] / pf),
                empirical_margin_ub=emp,
                neighborhood_samples=neighborhood.ball_samples + 1,
                sup_local=float(local[i]),
                sup_hull=sup_hull,
            )
        )
    return reports


def _ratio(a, b):
    return math.inf if b == 0 else float(a / b)


def margin_bounds(
    net: NetworkSpec,
    x,
    y: int,
    hull_data=None,
    neighborhood: NeighborhoodConfig = NeighborhoodConfig(),
    search: SearchConfig | None = SearchConfig(),
    reference=None,
) -> MarginReport:
    x = np.asarray(x, dtype=np.float64)
    hull = x[None, :] if hull_data is None else hull_data
    return margin_reports(net, x[None, :], [y], hull, neighborhood, search, reference)[0]


def _default_radius(x, reference):
    if reference is None:
        return 10.0 * (np.linalg.norm(x) + 1.0)
    R = np.asarray(reference[0], dtype=np.float64)
    return 1.5 * float(np.max(np.linalg.norm(R - x, axis=1))) + 1e-12


def empirical_margin(net: NetworkSpec, x, y: int, search: SearchConfig = SearchConfig(), reference=None) -> float:
    """Upper bound on the margin from a directional boundary search.

    Scans rays from ``x`` (random unit directions, the descent directions
    of each pairwise score ``f_y - f_j`` at ``x``, and directions toward
    every reference point of another class) for the first label change,
    bisects it to ``rel_tol * ||x||``, and returns the smallest distance
    at which a differently labeled point was found. ``inf`` if none was.
    A sample with non-positive score has margin 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if score(net, x, y) <= 0:
        return 0.0
    rng = np.random.default_rng(search.seed)
    dirs = rng.standard_normal((search.directions, x.size))
    if search.gradient_directions:
        J = batch_jacobians(net, x[None, :])[0]
        G = J[y][None, :] - np.delete(J, y, axis=0)
        G = G[np.linalg.norm(G, axis=1) > 0]
        dirs = np.vstack([dirs, -G])
    if reference is not None and search.toward_others:
        Rx, Ry = np.atleast_2d(reference[0]), np.asarray(reference[1])
        others = Rx[Ry != y] - x
        others = others[np.linalg.norm(others, axis=1) > 0]
        dirs = np.vstack([dirs, others])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radius = search.max_radius or _default_radius(x, reference)
    ts = np.linspace(0.0, radius, search.scan_steps + 1)[1:]
    pts = x[None, None, :] + ts[None, :, None] * dirs[:, None, :]
    labels = classify(net, pts.reshape(-1, x.size)).reshape(len(dirs), len(ts))
    changed = labels != y
    hit = changed.any(axis=1)
    if not hit.any():
        return math.inf
    first = np.argmax(changed[hit], axis=1)
    hi = ts[first]
    lo = np.where(first > 0, ts[np.maximum(first - 1, 0)], 0.0)
    d = dirs[hit]
    tol = search.rel_tol * (np.linalg.norm(x) if np.linalg.norm(x) > 0 else 1.0)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        flip = classify(net, x[None, :] + mid[:, None] * d) != y
        hi = np.where(flip, mid, hi)
        lo = np.where(flip, lo, mid)
    return float(np.min(hi))


def geodesic_expansion_check(net: NetworkSpec, curve, endpoints=(0, -1)) -> tuple[float, float]:
    """``(||f(x') - f(x)||, max_t ||J(c(t))||_2 * length(c))`` for a sampled curve.

    ``curve`` is an ``(n, d)`` array of points along the curve; ``endpoints``
    picks the sub-curve between two sample indices.
    """
    C = np.asarray(curve, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 2:
        raise InvalidInputError("curve needs at least two points")
    if not np.all(np.isfinite(C)):
        raise InvalidInputError("curve has non-finite points")
    n = C.shape[0]
    a, b = (e % n for e in endpoints)
    if a == b:
        raise InvalidInputError("curve endpoints coincide")
    a, b = min(a, b), max(a, b)
    C = C[a : b + 1]
    F = predict(net, C[[0, -1]])
    lhs = float(np.linalg.norm(F[1] - F[0]))
    length = float(np.sum(np.linalg.norm(np.diff(C, axis=0), axis=1)))
    rhs = float(np.max(jacobian_spectral_norms(net, C))) * length
    return lhs, rhs


MARGIN_CSV_FIELDS = ("sample_id", "label", "score", "gamma1_hat", "gamma2_hat", "gamma3", "gamma4", "empirical_margin_ub")


def write_margin_csv(reports, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MARGIN_CSV_FIELDS)
        for i, (r, lab) in enumerate(zip(reports, labels)):
            w.writerow([i, int(lab), repr(r.score), repr(r.gamma1_hat), repr(r.gamma2_hat), repr(r.gamma3), repr(r.gamma4), repr(r.empirical_margin_ub)])
