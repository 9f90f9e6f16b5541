"""Desk-scale experiment harnesses: regularizer comparison, depth study, penalty strength."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from marginlab.data import Dataset, load_mnist, sample_gmm, two_gmm
from marginlab.margin import scores, weight_norm_product
from marginlab.network import jacobian_frobenius_norms, jacobian_spectral_norms, random_network
from marginlab.parallel import ordered_map
from marginlab.training import RegKind, TrainConfig, accuracy, train

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0)

# Overlapping full-rank pair used when no image data is available.
SURROGATE = {"dim": 50, "k": 50, "separation": 2.5, "spread": 1.5}


def surrogate_spec(seed: int, **overrides):
    p = {**SURROGATE, **overrides}
    return two_gmm(p["dim"], p["k"], p["separation"], p["spread"], seed=seed)


def _schedule(epochs: int, rates=(0.01, 0.001)) -> tuple:
    n = len(rates)
    sizes = [epochs // n] * n
    sizes[-1] += epochs - sum(sizes)
    return tuple((r, s) for r, s in zip(rates, sizes) if s > 0)


@dataclass
class SelectedRun:
    reg: str
    lam: float
    val_acc: float
    test_acc: float


@dataclass
class RegComparison:
    seeds: list
    weight_decay: list = field(default_factory=list)
    jacobian: list = field(default_factory=list)

    @property
    def improvement_points(self) -> float:
        """Mean paired test-accuracy gain of the Jacobian penalty, in percentage points."""
        return 100.0 * float(np.mean([j.test_acc - w.test_acc for j, w in zip(self.jacobian, self.weight_decay)]))

    @property
    def mean_accuracies(self) -> tuple[float, float]:
        return (float(np.mean([r.test_acc for r in self.weight_decay])), float(np.mean([r.test_acc for r in self.jacobian])))


def _select(args):
    fit, val, test, widths, base, reg, lambdas, seed = args
    best = None
    for lam in lambdas:
        net = random_network(seed, fit.input_dim, widths, fit.num_classes, "relu")
        cfg = replace(base, seed=seed, reg=RegKind(reg, lam))
        net, _ = train(net, fit, cfg)
        v = accuracy(net, val.X, val.y)
        if best is None or v > best.val_acc:
            best = SelectedRun(reg, lam, v, accuracy(net, test.X, test.y))
    return best


def compare_regularizers(
    train_sets: list[Dataset],
    test_sets: list[Dataset],
    seeds,
    widths=(64, 64),
    lambdas=LAMBDA_GRID,
    val_fraction: float = 0.2,
    config: TrainConfig | None = None,
    jobs: int = 1,
) -> RegComparison:
    """Weight decay against the Jacobian penalty, paired by seed.

    For each seed both regularizers share the initialization, the split
    into fit and validation parts, and the batch order. ``lambda`` is chosen
    per regularizer by validation accuracy; the selected model's test
    accuracy is reported.
    """
    config = config or TrainConfig(batch_size=50, epochs=40, schedule=_schedule(40), clip_norm=10.0)
    tasks = []
    for seed, tr, te in zip(seeds, train_sets, test_sets):
        n_fit = len(tr) - int(round(val_fraction * len(tr)))
        fit, val = tr.split(n_fit, np.random.default_rng(seed))
        for reg in ("weight_decay", "jacobian"):
            tasks.append((fit, val, te, list(widths), config, reg, tuple(lambdas), seed))
    runs = ordered_map(_select, tasks, jobs)
    out = RegComparison(list(seeds))
    for i in range(0, len(runs), 2):
        out.weight_decay.append(runs[i])
        out.jacobian.append(runs[i + 1])
    return out


def surrogate_regularizer_study(seeds=range(5), m: int = 500, test_m: int = 5000, jobs: int = 1, **kw) -> RegComparison:
    trains, tests = [], []
    for s in seeds:
        spec = surrogate_spec(100 + s)
        trains.append(sample_gmm(spec, m, seed=s))
        tests.append(sample_gmm(spec, test_m, seed=1000 + s))
    return compare_regularizers(trains, tests, list(seeds), jobs=jobs, **kw)


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_regularizer_study(directory, seeds=range(5), m: int = 1000, test_m: int = 10000, jobs: int = 1, **kw) -> RegComparison:
    """Regularizer comparison on ``m`` MNIST training images drawn per seed."""
    paths = [Path(directory) / f for f in MNIST_FILES]
    full_train, full_test = load_mnist(paths[0], paths[1]), load_mnist(paths[2], paths[3])
    trains, tests = [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        trains.append(full_train.subset(rng.choice(len(full_train), m, replace=False)))
        tests.append(full_test.subset(np.arange(min(test_m, len(full_test)))))
    return compare_regularizers(trains, tests, list(seeds), jobs=jobs, **kw)


@dataclass
class DepthRow:
    seed: int
    depth: int
    max_train_jac_spec: float
    frobenius_product: float
    min_train_score: float
    train_acc: float


def _depth_run(args):
    ds, depth, width, seed, epochs = args
    net = random_network(seed, ds.input_dim, [width] * (depth - 1), ds.num_classes, "relu")
    cfg = TrainConfig(batch_size=128, epochs=epochs, seed=seed, weight_norm=True,
                      schedule=_schedule(epochs, (0.1, 0.01, 0.001)))
    net, hist = train(net, ds, cfg)
    return DepthRow(
        seed, depth,
        float(np.max(jacobian_spectral_norms(net, ds.X))),
        weight_norm_product(net, "frobenius"),
        float(np.min(scores(net, ds.X, ds.y))),
        hist[-1]["train_acc"],
    )


def weight_norm_depth_study(seeds=range(5), depths=(2, 3, 4), m: int = 5000, width: int = 64,
                            epochs: int = 30, jobs: int = 1) -> list[DepthRow]:
    """Weight-normalized ReLU nets of several depths (weight layers, head included).

    Data: a separable low-rank two-Gaussian pair, redrawn per seed.
    """
    tasks = []
    for s in seeds:
        ds = sample_gmm(two_gmm(50, 5, 3.0, 1.5, seed=100 + s), m, seed=s)
        tasks.extend((ds, d, width, s, epochs) for d in depths)
    return ordered_map(_depth_run, tasks, jobs)


def depth_trend_votes(rows: list[DepthRow]) -> tuple[int, int, int]:
    """``(jacobian non-increasing, frobenius increasing, comparisons)`` over adjacent depths per seed."""
    by_seed: dict[int, list[DepthRow]] = {}
    for r in rows:
        by_seed.setdefault(r.seed, []).append(r)
    jac = frob = total = 0
    for rs in by_seed.values():
        rs = sorted(rs, key=lambda r: r.depth)
        for a, b in zip(rs, rs[1:]):
            total += 1
            jac += b.max_train_jac_spec <= a.max_train_jac_spec
            frob += b.frobenius_product > a.frobenius_product
    return jac, frob, total


def penalty_strength_study(lam: float = 1e6, seed: int = 0, m: int = 500, epochs: int = 30) -> tuple[float, float]:
    """Mean training-set ``||J||_F`` without and with a Jacobian penalty of strength ``lam``.

    Both runs share seed, data, architecture and gradient clipping (needed
    for the large penalty to stay finite).
    """
    ds = sample_gmm(surrogate_spec(100 + seed), m, seed=seed)
    out = []
    for reg in (RegKind("none"), RegKind("jacobian", lam)):
        net = random_network(seed, ds.input_dim, [64, 64], ds.num_classes, "relu")
        cfg = TrainConfig(batch_size=50, epochs=epochs, seed=seed, reg=reg, schedule=_schedule(epochs), clip_norm=1.0)
        net, _ = train(net, ds, cfg)
        out.append(float(np.mean(jacobian_frobenius_norms(net, ds.X))))
    return out[0], out[1]


def reduction_factor(before: float, after: float) -> float:
    return math.inf if after == 0 else before / after
