"""Losses, Jacobian-penalty gradients, SGD with momentum and the training loop.

The Jacobian penalty ``mean_i ||E_i J(x_i)||_F^2`` (``E_i`` the identity for
the full penalty, one-hot class rows for the sampled variant) is
differentiated exactly: the Jacobian rows are built by pulling ``E_i`` back
through the net, and that row computation is itself back-propagated. The
second pass leaves extra adjoints on every pre-activation (through ``sigma''``
and the softmax Jacobian), which the ordinary backward pass then carries to
earlier layers.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from marginlab.linalg import InvalidInputError
from marginlab.network import (
    Dense,
    LayerCache,
    LinearHead,
    NetworkSpec,
    Pooling,
    Residual,
    SoftmaxHead,
    activation_derivative,
    activation_second_derivative,
    batch_jacobians,
    forward_batch,
    jacobian_spectral_norms,
    pullback_rows,
)

logger = logging.getLogger(__name__)

LOSSES = ("categorical_cross_entropy", "hinge")
REGS = ("none", "weight_decay", "jacobian", "jacobian_sampled_row")
LOG_CLAMP = 30.0


@dataclass(frozen=True)
class LossKind:
    variant: str = "categorical_cross_entropy"
    margin: float = 1.0

    def __post_init__(self):
        if self.variant not in LOSSES:
            raise InvalidInputError(f"unknown loss {self.variant!r}")


@dataclass(frozen=True)
class RegKind:
    variant: str = "none"
    lam: float = 0.0
    rows_per_sample: int = 1

    def __post_init__(self):
        if self.variant not in REGS:
            raise InvalidInputError(f"unknown regularizer {self.variant!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidInputError("regularization factor must be finite and non-negative")
        if self.rows_per_sample < 1:
            raise InvalidInputError("rows_per_sample must be at least 1")


CCE = LossKind("categorical_cross_entropy")
NO_REG = RegKind()


def _check_labels(y, num_classes):
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise InvalidInputError("labels must be a 1-D integer array")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InvalidInputError(f"label out of range [0, {num_classes})")
    return y


def _check_loss_head(net, loss):
    if loss is None:
        return
    if loss.variant == "categorical_cross_entropy" and not isinstance(net.head, SoftmaxHead):
        raise InvalidInputError("cross-entropy needs a softmax head")
    if loss.variant == "hinge" and isinstance(net.head, SoftmaxHead):
        raise InvalidInputError("hinge loss needs a linear head")


def cross_entropy_from_probs(p, y) -> float:
    """Mean ``-log p_y`` with ``log p`` clamped at ``-30``."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    y = np.atleast_1d(y)
    picked = p[np.arange(len(y)), y]
    logs = np.maximum(np.log(np.maximum(picked, np.exp(-LOG_CLAMP))), -LOG_CLAMP)
    return float(-np.mean(logs))


def _loss_and_pre_grad(loss: LossKind, pre: np.ndarray, y: np.ndarray):
    """Per-sample losses and their gradient w.r.t. head pre-activations."""
    B, K = pre.shape
    rows = np.arange(B)
    if loss.variant == "categorical_cross_entropy":
        mx = pre.max(axis=1, keepdims=True)
        e = np.exp(pre - mx)
        s = e.sum(axis=1)
        values = np.log(s) + mx[:, 0] - pre[rows, y]
        grad = e / s[:, None]
        grad[rows, y] -= 1.0
        return values, grad
    slack = loss.margin - (pre[rows, y][:, None] - pre)
    slack[rows, y] = 0.0
    active = (slack > 0).astype(np.float64)
    active[rows, y] = 0.0
    values = np.maximum(slack, 0.0).sum(axis=1) / (K - 1)
    grad = active / (K - 1)
    grad[rows, y] = -active.sum(axis=1) / (K - 1)
    return values, grad


def loss_value(net: NetworkSpec, X, y, loss: LossKind = CCE) -> float:
    """Mean training-surrogate loss over a batch (labels are 0-based)."""
    _check_loss_head(net, loss)
    y = _check_labels(y, net.num_classes)
    pre = forward_batch(net, X)[-1].pre
    return float(np.mean(_loss_and_pre_grad(loss, pre, y)[0]))


# -- Jacobian rows and their adjoints -------------------------------------------


@dataclass
class _RowRecord:
    out: np.ndarray
    inner: list | None = None


def _rows_forward(layer, cache: LayerCache, R: np.ndarray):
    if isinstance(layer, Residual):
        records, H = [], R
        for sub, c in zip(reversed(layer.inner), reversed(cache.inner)):
            rec = _RowRecord(H)
            H = pullback_rows(sub, c, H)
            records.append(rec)
        return R + H, _RowRecord(R, records[::-1])
    return pullback_rows(layer, cache, R), _RowRecord(R)


class _Grads:
    def __init__(self, net: NetworkSpec):
        self.W = {}
        self.b = {}
        self.order = []
        for layer in net.layers:
            subs = layer.inner if isinstance(layer, Residual) else () if isinstance(layer, Pooling) else (layer,)
            for sub in subs:
                self.W[id(sub)] = np.zeros_like(sub.W)
                self.b[id(sub)] = np.zeros_like(sub.b)
                self.order.append(sub)

    def as_list(self):
        out = []
        for sub in self.order:
            out.append(self.W[id(sub)])
            out.append(self.b[id(sub)])
        return out


def _rows_adjoint(layer, cache: LayerCache, rec: _RowRecord, Rbar_in, grads: _Grads, extra: dict):
    """Back-propagate the adjoint of ``R_in = R_out @ G(layer)``; returns ``Rbar_out``."""
    R = rec.out
    if isinstance(layer, Dense):
        s = activation_derivative(layer.activation, cache.pre)
        Q = R * s[:, None, :]
        grads.W[id(layer)] += np.einsum("bko,bki->oi", Q, Rbar_in)
        Qbar = Rbar_in @ layer.W.T
        sbar = np.sum(Qbar * R, axis=1)
        extra[id(cache)] = activation_second_derivative(layer.activation, cache.pre) * sbar
        return Qbar * s[:, None, :]
    if isinstance(layer, SoftmaxHead):
        p = cache.out
        RS = R * p[:, None, :] - (R @ p[:, :, None]) * p[:, None, :]
        grads.W[id(layer)] += np.einsum("bko,bki->oi", RS, Rbar_in)
        T = Rbar_in @ layer.W.T
        # S = diag(p) - p p^T; adjoint of p from Sbar = R^T T, then chain through softmax.
        Rp = R @ p[:, :, None]
        Tp = T @ p[:, :, None]
        pbar = np.sum(R * T, axis=1) - np.sum(R * Tp, axis=1) - np.sum(T * Rp, axis=1)
        extra[id(cache)] = p * pbar - p * np.sum(p * pbar, axis=1, keepdims=True)
        return T * p[:, None, :] - (T @ p[:, :, None]) * p[:, None, :]
    if isinstance(layer, LinearHead):
        grads.W[id(layer)] += np.einsum("bko,bki->oi", R, Rbar_in)
        return Rbar_in @ layer.W.T
    if isinstance(layer, Pooling):
        if layer.kind == "average":
            return Rbar_in @ layer._matrix.T
        if layer.kind == "downsample":
            return Rbar_in[:, :, layer._index[:, 0]]
        return np.take_along_axis(Rbar_in, cache.sel[:, None, :], axis=2)
    if isinstance(layer, Residual):
        H = Rbar_in
        for sub, c, r in zip(layer.inner, cache.inner, rec.inner):
            H = _rows_adjoint(sub, c, r, H, grads, extra)
        return Rbar_in + H
    raise InvalidInputError(f"unknown layer type {type(layer).__name__}")


def _backward(layer, cache: LayerCache, abar, grads: _Grads, extra: dict, head_pre_bar=None):
    """Ordinary reverse pass; ``extra`` adds pre-activation adjoints."""
    if isinstance(layer, (LinearHead, SoftmaxHead)):
        zbar = head_pre_bar + extra.get(id(cache), 0.0)
    elif isinstance(layer, Dense):
        zbar = activation_derivative(layer.activation, cache.pre) * abar + extra.get(id(cache), 0.0)
    elif isinstance(layer, Pooling):
        if layer.kind == "max":
            out = np.zeros_like(cache.inp)
            np.put_along_axis(out, cache.sel, abar, axis=1)
            return out
        if layer.kind == "downsample":
            out = np.zeros_like(cache.inp)
            out[:, layer._index[:, 0]] = abar
            return out
        return abar @ layer._matrix
    elif isinstance(layer, Residual):
        h = abar
        for sub, c in zip(reversed(layer.inner), reversed(cache.inner)):
            h = _backward(sub, c, h, grads, extra)
        return abar + h
    else:
        raise InvalidInputError(f"unknown layer type {type(layer).__name__}")
    grads.W[id(layer)] += zbar.T @ cache.inp
    grads.b[id(layer)] += zbar.sum(axis=0)
    return zbar @ layer.W


def penalty_rows(reg: RegKind, batch: int, num_classes: int, rng=None) -> np.ndarray | None:
    """Row selectors ``E_i`` for the Jacobian penalty, shape ``(batch, k, N_Y)``."""
    if reg.variant == "jacobian":
        return np.broadcast_to(np.eye(num_classes), (batch, num_classes, num_classes)).copy()
    if reg.variant == "jacobian_sampled_row":
        rng = np.random.default_rng(rng)
        k = min(reg.rows_per_sample, num_classes)
        E = np.zeros((batch, k, num_classes))
        for i in range(batch):
            picks = rng.choice(num_classes, size=k, replace=False)
            E[i, np.arange(k), picks] = 1.0
        return E
    return None


def objective_and_gradients(
    net: NetworkSpec,
    X,
    y,
    loss: LossKind | None = CCE,
    reg: RegKind = NO_REG,
    rows=None,
    rng=None,
):
    """Value and exact gradient of ``loss + reg`` for one batch.

    Returns ``(value, grads)`` with ``grads`` aligned to ``net.parameters()``.
    ``rows`` fixes the penalty row selectors (otherwise they are drawn from
    ``rng`` for the sampled-row variant). ``loss=None`` drops the data term.
    """
    _check_loss_head(net, loss)
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y, net.num_classes)
    caches = forward_batch(net, X)
    B = X.shape[0]
    grads = _Grads(net)
    extra: dict = {}
    value = 0.0
    head_bar = np.zeros_like(caches[-1].pre)
    if loss is not None:
        vals, g = _loss_and_pre_grad(loss, caches[-1].pre, y)
        value += float(np.mean(vals))
        head_bar += g / B

    if reg.variant in ("jacobian", "jacobian_sampled_row") and reg.lam > 0:
        E = penalty_rows(reg, B, net.num_classes, rng) if rows is None else np.asarray(rows, dtype=np.float64)
        records, R = [], E
        for layer, c in zip(reversed(net.layers), reversed(caches)):
            R, rec = _rows_forward(layer, c, R)
            records.append(rec)
        records.reverse()
        value += reg.lam * float(np.sum(R * R)) / B
        Rbar = (2.0 * reg.lam / B) * R
        for layer, c, rec in zip(net.layers, caches, records):
            Rbar = _rows_adjoint(layer, c, rec, Rbar, grads, extra)

    abar = None
    for i in range(len(net.layers) - 1, -1, -1):
        layer, c = net.layers[i], caches[i]
        abar = _backward(layer, c, abar, grads, extra, head_pre_bar=head_bar if i == len(net.layers) - 1 else None)

    out = grads.as_list()
    if reg.variant == "weight_decay" and reg.lam > 0:
        for g, p, is_w in zip(out, net.parameters(), net.weight_mask()):
            if is_w:
                value += reg.lam * float(np.sum(p * p))
                g += 2.0 * reg.lam * p
    return value, out


def gradients(net, X, y, loss=CCE, reg=NO_REG, rows=None, rng=None) -> list[np.ndarray]:
    return objective_and_gradients(net, X, y, loss, reg, rows, rng)[1]


def objective(net, X, y, loss=CCE, reg=NO_REG, rows=None) -> float:
    """Objective value alone, computed without any backward machinery."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y, net.num_classes)
    value = 0.0
    if loss is not None:
        value += loss_value(net, X, y, loss)
    if reg.variant in ("jacobian", "jacobian_sampled_row") and reg.lam > 0:
        if rows is None:
            rows = penalty_rows(reg, X.shape[0], net.num_classes, 0)
        R = batch_jacobians(net, X, rows=rows)
        value += reg.lam * float(np.sum(R * R)) / X.shape[0]
    if reg.variant == "weight_decay":
        value += reg.lam * sum(float(np.sum(W * W)) for W in net.weight_matrices())
    return value


def jacobian_penalty(net: NetworkSpec, X) -> float:
    """``mean_i ||J(x_i)||_F^2``."""
    J = batch_jacobians(net, np.atleast_2d(X))
    return float(np.sum(J * J)) / J.shape[0]


def grad_check(
    net: NetworkSpec,
    X,
    y,
    loss: LossKind | None = CCE,
    reg: RegKind = NO_REG,
    step: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Checks ``n_coords`` randomly chosen parameter entries (all of them when
    the net has fewer). The relative error of an entry is
    ``|a - n| / max(|a|, |n|, 1e-4 * max_j |a_j|)``, so entries that are tiny
    compared to the gradient's scale are judged on that scale.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    rows = penalty_rows(reg, X.shape[0], net.num_classes, rng)
    _, analytic = objective_and_gradients(net, X, y, loss, reg, rows=rows)
    params = [p.copy() for p in net.parameters()]
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    picks = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    flat_a = np.concatenate([g.reshape(-1) for g in analytic])
    scale = 1e-4 * float(np.max(np.abs(flat_a))) + 1e-300
    worst = 0.0
    for idx in picks:
        k = int(np.searchsorted(offsets, idx, side="right") - 1)
        j = idx - offsets[k]
        vals = []
        for sign in (1.0, -1.0):
            trial = [p.copy() for p in params]
            trial[k].reshape(-1)[j] += sign * step
            vals.append(objective(net.with_parameters(trial), X, y, loss, reg, rows=rows))
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        a = flat_a[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), scale)
        worst = max(worst, err)
    return worst


# -- optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params])


def sgd_step(state: OptimizerState, params, grads, rate: float, momentum: float = 0.9) -> list[np.ndarray]:
    """Heavy-ball momentum: ``v <- momentum v - rate g``; ``p <- p + v``.

    Updates ``state`` in place and returns new parameter arrays.
    """
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise InvalidInputError("parameter, gradient and velocity lists differ in length")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.velocity[i].shape:
            raise InvalidInputError(f"shape mismatch in parameter {i}")
        v = momentum * state.velocity[i] - rate * g
        state.velocity[i] = v
        out.append(p + v)
    state.step += 1
    return out


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 120
    seed: int = 0
    loss: LossKind = field(default_factory=LossKind)
    reg: RegKind = field(default_factory=RegKind)
    schedule: Sequence[tuple[float, int]] = ((0.01, 40), (0.001, 40), (0.0001, 40))
    momentum: float = 0.9
    clip_norm: float | None = None
    weight_norm: bool = False
    stats_samples: int | None = 512

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be at least 1")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be at least 1")
        if not self.schedule:
            raise InvalidInputError("learning-rate schedule is empty")

    def rate(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch; the last rate persists."""
        seen = 0
        for rate, n in self.schedule:
            seen += n
            if epoch < seen:
                return float(rate)
        return float(self.schedule[-1][0])


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_acc", "mean_jac_frob", "max_jac_spec")


def accuracy(net: NetworkSpec, X, y) -> float:
    from marginlab.network import classify

    return float(np.mean(classify(net, X) == np.asarray(y)))


def _xy(data):
    if data is None:
        return None
    if hasattr(data, "X"):
        return np.asarray(data.X, dtype=np.float64), np.asarray(data.y)
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y)


def train(net: NetworkSpec, dataset, config: TrainConfig, test=None, on_epoch=None):
    """Mini-batch SGD with momentum.

    ``dataset`` and ``test`` are Dataset objects or ``(X, y)`` pairs. Returns
    the trained net and a list of per-epoch history rows (dicts keyed by
    ``HISTORY_FIELDS``). Fully determined by ``config.seed``.
    """
    X, y = _xy(dataset)
    if X.shape[0] == 0:
        raise InvalidInputError("empty training set")
    y = _check_labels(y, net.num_classes)
    test = _xy(test)
    rng = np.random.default_rng(config.seed)
    stats_idx = np.arange(X.shape[0])
    if config.stats_samples is not None and X.shape[0] > config.stats_samples:
        stats_idx = np.sort(rng.choice(X.shape[0], size=config.stats_samples, replace=False))
    if config.weight_norm:
        from marginlab.normalize import weight_normalize

        net = weight_normalize(net)
    params = [p.copy() for p in net.parameters()]
    state = OptimizerState.zeros_like(params)
    history = []
    for epoch in range(config.epochs):
        rate = config.rate(epoch)
        order = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, X.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            value, grads = objective_and_gradients(net, X[idx], y[idx], config.loss, config.reg, rng=rng)
            total += value * len(idx)
            if config.clip_norm is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > config.clip_norm:
                    grads = [g * (config.clip_norm / norm) for g in grads]
            params = sgd_step(state, params, grads, rate, config.momentum)
            net = net.with_parameters(params)
            if config.weight_norm:
                from marginlab.normalize import weight_normalize

                net = weight_normalize(net)
                params = [p.copy() for p in net.parameters()]
        if not all(np.all(np.isfinite(p)) for p in params):
            raise FloatingPointError(f"parameters diverged in epoch {epoch + 1}")
        Xs = X[stats_idx]
        J = batch_jacobians(net, Xs)
        row = {
            "epoch": epoch + 1,
            "lr": rate,
            "train_loss": total / X.shape[0],
            "train_acc": accuracy(net, X, y),
            "test_acc": accuracy(net, *test) if test is not None else float("nan"),
            "mean_jac_frob": float(np.mean(np.sqrt(np.sum(J * J, axis=(1, 2))))),
            "max_jac_spec": float(np.max(jacobian_spectral_norms(net, Xs))),
        }
        history.append(row)
        logger.debug("epoch %d: %s", epoch + 1, row)
        if on_epoch is not None:
            on_epoch(net, row)
    return net, history


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
