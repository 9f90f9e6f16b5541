"""Executable property suites for the Jacobian and margin theory.

Each suite builds seeded random nets, checks one property and returns a
:class:`SuiteResult`. ``jacobian_fn`` lets a caller swap in a different
Jacobian routine, which is how the negative-control fault injection works.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from marginlab import bounds, margin, training
from marginlab.linalg import frobenius_norm, small_spectral_norm, spectral_norm
from marginlab.network import (
    ACTIVATIONS,
    Dense,
    NetworkSpec,
    Pooling,
    SoftmaxHead,
    average_jacobian,
    jacobian_spectral_norms,
    layer_jacobian,
    network_jacobian,
    predict,
    random_network,
    resnet_jacobian_expansion,
    Residual,
    softmax_jacobian,
    switching_distance,
)
from marginlab.normalize import batch_norm_equivalent, batch_norm_forward

KINK_GUARD = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)


def fd_jacobian(f: Callable, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    E = np.eye(x.size) * step
    Fp = f(x[None, :] + E)
    Fm = f(x[None, :] - E)
    return ((Fp - Fm) / (2.0 * step)).T


def random_suite_net(rng, kind: int) -> NetworkSpec:
    """The ``kind``-th net of the shared sweep over depth, nonlinearity, pooling and residual blocks."""
    act = ("relu", "sigmoid", "tanh")[kind % 3]
    depth = 2 + kind % 4
    widths = [int(rng.integers(4, 65)) for _ in range(depth - 1)]
    pool_after = int(rng.integers(0, depth - 1)) if kind % 2 else None
    residual_at = int(rng.integers(0, depth - 1)) if kind % 5 in (1, 3) else None
    pool_kind = ("max", "average", "downsample")[(kind // 2) % 3]
    return random_network(
        rng, int(rng.integers(3, 9)), widths, int(rng.integers(2, 6)), act,
        pool_after=pool_after, pool_kind=pool_kind, residual_at=residual_at,
    )


def _safe_point(net, rng, scale=1.0):
    for _ in range(200):
        x = scale * rng.standard_normal(net.input_dim)
        if switching_distance(net, x)[0] > KINK_GUARD:
            return x
    raise RuntimeError("could not find an input away from switching points")


def suite_jacobian(seed=0, n_nets=50, jacobian_fn=network_jacobian, tol=1e-5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in range(n_nets):
        net = random_suite_net(rng, kind)
        x = _safe_point(net, rng)
        J = jacobian_fn(net, x)
        Jfd = fd_jacobian(lambda X: predict(net, X), x)
        err = np.max(np.abs(J - Jfd)) / max(np.max(np.abs(Jfd)), 1e-12)
        worst = max(worst, err)
    return SuiteResult("jacobian", worst <= tol, f"max rel error {worst:.3e} over {n_nets} nets (tol {tol:g})")


def suite_average_jacobian(seed=0, n_pairs=100, steps=64) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst_smooth = worst_linear = 0.0
    for i in range(n_pairs):
        act = ("sigmoid", "tanh")[i % 2]
        net = random_network(rng, 4, [16, 16], 3, act)
        lin = random_network(rng, 4, [8], 3, "identity", head="linear")
        x, x2 = rng.standard_normal(4), rng.standard_normal(4)
        d = np.linalg.norm(x2 - x)
        for n, store in ((net, "s"), (lin, "l")):
            Jbar = average_jacobian(n, x, x2, steps)
            r = np.linalg.norm(predict(n, x2) - predict(n, x) - Jbar @ (x2 - x)) / d
            if store == "s":
                worst_smooth = max(worst_smooth, r)
            else:
                worst_linear = max(worst_linear, r)
    ok = worst_smooth <= 1e-6 and worst_linear <= 1e-12
    return SuiteResult("theorem3", ok, f"smooth residual/dist {worst_smooth:.2e}, linear {worst_linear:.2e}")


def suite_distance_expansion(seed=0, n_pairs=50, samples=200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for i in range(n_pairs):
        net = random_network(rng, 3, [12, 12], 3, ACTIVATIONS[i % 3])
        x, x2 = rng.standard_normal(3), rng.standard_normal(3)
        t = np.linspace(0, 1, samples)
        seg = x[None, :] + t[:, None] * (x2 - x)[None, :]
        lhs = np.linalg.norm(predict(net, x2) - predict(net, x))
        rhs = (np.max(jacobian_spectral_norms(net, seg)) + 1e-8) * np.linalg.norm(x2 - x)
        worst = max(worst, lhs - rhs)
    return SuiteResult("distance_expansion", worst <= 0, f"max(lhs - rhs) = {worst:.3e}")


def suite_layer_norms(seed=0, n_logits=1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    soft = max(small_spectral_norm(softmax_jacobian(rng.standard_normal(int(rng.integers(2, 11))) * 5)) for _ in range(n_logits))
    layer_excess = sig_excess = -math.inf
    for i in range(60):
        act = ("relu", "sigmoid", "tanh")[i % 3]
        W = rng.standard_normal((int(rng.integers(2, 20)), int(rng.integers(2, 20))))
        layer = Dense(W, rng.standard_normal(W.shape[0]), act)
        z = rng.standard_normal(W.shape[1]) * 2
        n = small_spectral_norm(layer_jacobian(layer, z))
        w2 = small_spectral_norm(W)
        layer_excess = max(layer_excess, n - w2)
        if act == "sigmoid":
            sig_excess = max(sig_excess, n - 0.25 * w2)
        head = SoftmaxHead(W, np.zeros(W.shape[0]))
        layer_excess = max(layer_excess, small_spectral_norm(layer_jacobian(head, z)) - w2)
    pool_ok = True
    pool_detail = []
    for kind in ("downsample", "max", "average"):
        dim = 24
        sizes = rng.integers(1, 5, size=12)
        regions, start = [], 0
        for s in sizes:
            if start + s > dim:
                break
            regions.append(tuple(range(start, start + s)))
            start += s
        layer = Pooling(kind, tuple(regions), dim)
        n = small_spectral_norm(layer_jacobian(layer, rng.standard_normal(dim)))
        pool_detail.append(f"{kind}={n:.12f}")
        pool_ok &= n <= 1 + 1e-8
        if kind in ("downsample", "max"):
            pool_ok &= abs(n - 1.0) <= 1e-8
    ok = soft <= 1 + 1e-8 and layer_excess <= 1e-8 and sig_excess <= 1e-8 and pool_ok
    return SuiteResult(
        "layer_norms", ok,
        f"softmax max {soft:.6f}; layer excess {layer_excess:.2e}; sigmoid excess {sig_excess:.2e}; pools {', '.join(pool_detail)}",
    )


def orthonormal_net(rng, M: int, L: int) -> NetworkSpec:
    """``L`` square layers with orthonormal rows: ``L - 1`` ReLU layers and a linear head."""
    layers = []
    for i in range(L):
        Q, _ = np.linalg.qr(rng.standard_normal((M, M)))
        if i < L - 1:
            layers.append(Dense(Q, np.zeros(M), "relu"))
        else:
            from marginlab.network import LinearHead

            layers.append(LinearHead(Q, np.zeros(M)))
    return NetworkSpec(tuple(layers))


def suite_orthonormal(seed=0, M=16, L=3) -> SuiteResult:
    rng = np.random.default_rng(seed)
    net = orthonormal_net(rng, M, L)
    worst = 0.0
    checked = 0
    for _ in range(200):
        x = rng.standard_normal(M)
        y = int(np.argmax(predict(net, x)))
        o = margin.score(net, x, y)
        if o <= 0:
            continue
        rep = margin.margin_bounds(net, x, y, search=None)
        worst = max(worst, abs(rep.gamma3 - o), abs(rep.gamma4 - o * M ** (-L / 2)))
        checked += 1
        if checked >= 20:
            break
    return SuiteResult("orthonormal", worst <= 1e-10 and checked > 0, f"max deviation {worst:.2e} over {checked} samples")


def suite_batchnorm(seed=0, n_seeds=10, batch=32) -> SuiteResult:
    worst = 0.0
    for s in range(n_seeds):
        rng = np.random.default_rng(seed + s)
        net = random_network(rng, 10, [24, 16], 4, "relu")
        Xb = rng.standard_normal((batch, 10))
        eq = batch_norm_equivalent(net, Xb)
        worst = max(worst, float(np.max(np.abs(batch_norm_forward(net, Xb) - predict(eq, Xb)))))
        for layer in eq.layers[:-1]:
            worst = max(worst, float(np.max(np.abs(np.linalg.norm(layer.W, axis=1) - 1.0))))
    return SuiteResult("batchnorm", worst <= 1e-10, f"max discrepancy {worst:.2e}")


def residual_net(rng, dim: int, blocks: int, classes: int = 3, act: str = "tanh") -> NetworkSpec:
    layers = []
    for _ in range(blocks):
        layers.append(Residual((
            Dense(rng.standard_normal((dim, dim)) * 0.6, 0.1 * rng.standard_normal(dim), act),
            Dense(rng.standard_normal((dim, dim)) * 0.6, 0.1 * rng.standard_normal(dim), act),
        )))
    layers.append(SoftmaxHead(rng.standard_normal((classes, dim)), rng.standard_normal(classes)))
    return NetworkSpec(tuple(layers))


def suite_resnet(seed=0, jacobian_fn=network_jacobian) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for blocks in (1, 2, 3, 4):
        for act in ("tanh", "relu", "sigmoid"):
            net = residual_net(rng, 4, blocks, act=act)
            x = rng.standard_normal(4)
            worst = max(worst, float(np.max(np.abs(resnet_jacobian_expansion(net, x) - jacobian_fn(net, x)))))
    return SuiteResult("resnet", worst <= 1e-10, f"max |expansion - product| {worst:.2e}")


def suite_gradients(seed=0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    regs = [
        training.NO_REG,
        training.RegKind("weight_decay", 0.05),
        training.RegKind("jacobian", 0.1),
        training.RegKind("jacobian_sampled_row", 0.1),
    ]
    combos = 0
    for act in ("sigmoid", "tanh", "relu"):
        for head, loss in (("softmax", training.CCE), ("linear", training.LossKind("hinge"))):
            for reg in regs:
                for _ in range(50):
                    net = random_network(rng, 5, [8, 6], 3, act, head=head, pool_after=0)
                    X = rng.standard_normal((6, 5))
                    if np.min(switching_distance(net, X)) > 1e-3:
                        break
                y = rng.integers(0, 3, size=6)
                worst = max(worst, training.grad_check(net, X, y, loss, reg, seed=int(rng.integers(1 << 30))))
                combos += 1
    net = random_network(rng, 4, [6], 3, "tanh")
    X = rng.standard_normal((5, 4))
    full = training.jacobian_penalty(net, X)
    rows = 0.0
    for r in range(3):
        E = np.zeros((5, 1, 3))
        E[:, 0, r] = 1.0
        rows += training.objective(net, X, np.zeros(5, dtype=int), None, training.RegKind("jacobian_sampled_row", 1.0), rows=E)
    sum_err = abs(rows - full) / full
    ok = worst <= 1e-5 and sum_err <= 1e-12
    return SuiteResult("gradients", ok, f"max grad rel error {worst:.2e} over {combos} combos; row-sum mismatch {sum_err:.1e}")


def suite_bounds() -> SuiteResult:
    """Manifold bound arithmetic, and agreement with the general robustness bound.

    The manifold form adds the confidence term as a separate square root, so
    the exact relation is ``general^2 = first^2 + 2 log(1/delta) / m``.
    """
    v = bounds.ge_bound_manifold(2, 1, 1.0, 1.0, 1000, 0.5)
    worst = 0.0
    for k in (1, 2, 5):
        for cm in (0.5, 1.0, 3.0):
            for gamma in (0.1, 1.0, 2.0):
                m, delta = 500, 0.1
                K = 3 * (cm / (gamma / 2)) ** k
                if K < 1:
                    continue
                first = bounds.ge_bound_manifold(3, k, cm, gamma, m, delta, include_confidence=False)
                general = bounds.ge_bound_general(K, 0.0, 1.0, m, delta)
                rel = abs(general**2 - first**2 - 2.0 * math.log(1.0 / delta) / m) / general**2
                worst = max(worst, rel)
    ok = abs(v - 0.11169) <= 1e-4 and worst <= 1e-12
    return SuiteResult("bounds", ok, f"manifold bound {v:.5f}; max relative square-identity gap {worst:.1e}")


def random_curve(rng, dim: int, n: int = 512) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    a, b, c = (rng.standard_normal(dim) for _ in range(3))
    freq = rng.uniform(0.5, 3.0)
    return a + t * (b - a) + np.sin(np.pi * freq * t) * c


def suite_geodesic(seed=0, n_nets=50, n_curves=10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for i in range(n_nets):
        net = random_network(rng, 2, [16, 16], 3, ACTIVATIONS[i % 3])
        for _ in range(n_curves):
            lhs, rhs = margin.geodesic_expansion_check(net, random_curve(rng, 2))
            worst = max(worst, lhs - rhs)
    return SuiteResult("geodesic", worst <= 1e-8, f"max(lhs - rhs) = {worst:.3e}")


def suite_margins(seed=0, n_seeds=5) -> SuiteResult:
    from marginlab.data import sample_gmm, two_gmm

    violations = 0
    checked = 0
    for s in range(n_seeds):
        ds = sample_gmm(two_gmm(4, 2, 4.0, seed=seed + s), 60, seed=seed + s)
        net = random_network(seed + s, 4, [16, 16], 2, "relu")
        cfg = training.TrainConfig(batch_size=16, epochs=15, seed=seed + s, schedule=((0.05, 15),))
        net, _ = training.train(net, ds, cfg)
        reps = margin.margin_reports(net, ds.X, ds.y, neighborhood=margin.NeighborhoodConfig(ball_samples=16, hull_samples=64))
        for r in reps:
            if not r.applicable:
                continue
            checked += 1
            if not (r.empirical_margin_ub >= r.gamma3 - 1e-6 and r.gamma3 >= r.gamma4):
                violations += 1
            if not (r.gamma1_hat >= r.gamma2_hat >= r.gamma3):
                violations += 1
    return SuiteResult("margins", violations == 0 and checked > 0, f"{violations} violations over {checked} samples")


SUITES = {
    "jacobian": suite_jacobian,
    "theorem3": suite_average_jacobian,
    "distance_expansion": suite_distance_expansion,
    "layer_norms": suite_layer_norms,
    "orthonormal": suite_orthonormal,
    "batchnorm": suite_batchnorm,
    "resnet": suite_resnet,
    "gradients": suite_gradients,
    "bounds": suite_bounds,
    "geodesic": suite_geodesic,
    "margins": suite_margins,
}
JACOBIAN_SUITES = ("jacobian", "resnet")


def corrupted_jacobian(net, x):
    J = network_jacobian(net, x)
    J[0, 0] += 1e-3 * (1.0 + abs(J[0, 0]))
    return J


def run_suites(names=None, seed: int = 0, inject_fault: bool = False) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    out = []
    for name in names:
        fn = SUITES[name]
        kwargs = {}
        if name not in ("bounds",):
            kwargs["seed"] = seed
        if inject_fault and name in JACOBIAN_SUITES:
            kwargs["jacobian_fn"] = corrupted_jacobian
        out.append(fn(**kwargs))
    return out
