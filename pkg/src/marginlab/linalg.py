"""Dense matrix norms used by the margin and bound computations."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 1000
DEFAULT_SEED = 0


class InvalidInputError(ValueError):
    """Raised for non-finite or malformed numeric input."""


class UnconvergedWarning(RuntimeWarning):
    """Power iteration stopped at ``max_iters`` before reaching ``tol``."""


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {a.shape}")
    if a.size == 0:
        raise InvalidInputError("matrix has a zero dimension")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains non-finite entries")
    return a


def _power_run(a: np.ndarray, v: np.ndarray, tol: float, max_iters: int) -> PowerIterationResult:
    # Iterates on the Gram matrix a^T a; stops on a relative eigen-residual.
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return PowerIterationResult(0.0, 0, True)
    v = v / norm
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = a.T @ (a @ v)
        lam = float(v @ w)
        if lam <= 0.0:
            return PowerIterationResult(0.0, it, True)
        resid = np.linalg.norm(w - lam * v)
        if resid <= tol * lam:
            return PowerIterationResult(float(np.sqrt(lam)), it, True)
        v = w / np.linalg.norm(w)
    return PowerIterationResult(float(np.sqrt(max(lam, 0.0))), max_iters, False)


def power_iteration(
    m,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = DEFAULT_SEED,
) -> PowerIterationResult:
    """Estimate the largest singular value of ``m``.

    Two runs are made: one from the normalized all-ones vector and one from a
    Gaussian vector drawn under ``seed``. The larger estimate is returned, so
    a start vector orthogonal to the top singular direction cannot hide it.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    a = as_matrix(m)
    n = a.shape[1]
    first = _power_run(a, np.ones(n), tol, max_iters)
    rng = np.random.default_rng(seed)
    second = _power_run(a, rng.standard_normal(n), tol, max_iters)
    best = first if first.value >= second.value else second
    return PowerIterationResult(best.value, first.iterations + second.iterations, best.converged)


def spectral_norm(
    m,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = DEFAULT_SEED,
) -> float:
    """Largest singular value of ``m`` by power iteration.

    Emits :class:`UnconvergedWarning` and returns the best estimate when the
    iteration budget runs out.
    """
    res = power_iteration(m, tol=tol, max_iters=max_iters, seed=seed)
    if not res.converged:
        warnings.warn(
            f"spectral norm unconverged after {res.iterations} iterations "
            f"(estimate {res.value:.6g})",
            UnconvergedWarning,
            stacklevel=2,
        )
    return res.value


def frobenius_norm(m) -> float:
    a = as_matrix(m)
    return float(np.sqrt(np.sum(a * a)))


def small_spectral_norm(m) -> float:
    """Exact spectral norm through the smaller Gram matrix.

    Meant for short-and-wide matrices such as network Jacobians with a handful
    of class rows, where an eigen-decomposition of ``m m^T`` is cheap.
    """
    a = np.asarray(m, dtype=np.float64)
    g = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
    return float(np.sqrt(max(np.linalg.eigvalsh(g)[-1], 0.0)))
