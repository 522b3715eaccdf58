"""Gradient-oracle potentials, annealed stages and query accounting.

All potentials are vectorized: ``value`` and ``grad`` accept a single point
of shape (d,) or a batch of shape (n, d). A batch of n points counts as n
oracle queries.
"""
from __future__ import annotations

import math
import threading

import numpy as np


def _check_points(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (d,) or x.ndim > 2:
        raise ValueError(f"expected points of shape (d,) or (n, d) with d={d}, got {x.shape}")
    return x


def _n_rows(x) -> int:
    return 1 if x.ndim == 1 else x.shape[0]


class TargetPotential:
    """Base class: a mu-strongly convex, L-smooth potential f on R^d.

    Subclasses implement ``_value`` and ``_grad`` on validated arrays.
    ``log_z`` returns the analytic log normalizing constant or None.
    """

    def __init__(self, d: int, mu: float, L: float, minimizer=None):
        d = int(d)
        if d < 1:
            raise ValueError("dimension d must be >= 1")
        if not (mu > 0):
            raise ValueError(f"mu must be positive, got {mu}")
        if not (L >= mu):
            raise ValueError(f"L must be >= mu, got L={L}, mu={mu}")
        self.d = d
        self.mu = float(mu)
        self.L = float(L)
        self.minimizer = np.zeros(d) if minimizer is None else np.asarray(minimizer, float)

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    def value(self, x):
        return self._value(_check_points(x, self.d))

    def grad(self, x):
        return self._grad(_check_points(x, self.d))

    def log_z(self):
        return None

    def describe(self) -> dict:
        return {"name": type(self).__name__, "d": self.d, "mu": self.mu, "L": self.L}


class DiagQuadratic(TargetPotential):
    """f(x) = 0.5 * sum_i lambda_i x_i^2."""

    def __init__(self, lambdas):
        lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
        if lam.size == 0:
            raise ValueError("lambdas must be non-empty")
        if lam.ndim != 1 or np.any(~(lam > 0)) or not np.all(np.isfinite(lam)):
            raise ValueError("lambdas must be positive and finite")
        super().__init__(lam.size, lam.min(), lam.max())
        self.lambdas = lam

    def _value(self, x):
        return 0.5 * np.sum(self.lambdas * x * x, axis=-1)

    def _grad(self, x):
        return self.lambdas * x

    def log_z(self):
        return float(np.sum(0.5 * np.log(2 * np.pi / self.lambdas)))

    def describe(self):
        return {"name": "diag_quadratic", "lambdas": self.lambdas.tolist()}


class Gaussian(DiagQuadratic):
    """Isotropic f(x) = |x|^2 / (2 sigma2)."""

    def __init__(self, d: int, sigma2: float):
        if int(d) < 1:
            raise ValueError("dimension d must be >= 1")
        if not (sigma2 > 0) or not math.isfinite(sigma2):
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        super().__init__(np.full(int(d), 1.0 / sigma2))
        self.sigma2 = float(sigma2)

    def log_z(self):
        return 0.5 * self.d * math.log(2 * math.pi * self.sigma2)

    def describe(self):
        return {"name": "gaussian", "d": self.d, "sigma2": self.sigma2}


def make_gaussian(d: int, sigma2: float = 1.0) -> Gaussian:
    return Gaussian(d, sigma2)


def make_diag_quadratic(lambdas) -> DiagQuadratic:
    return DiagQuadratic(lambdas)


class AnnealStagePotential(TargetPotential):
    """f_i(x) = |x|^2 / (2 sigma2) + f(x); sigma2 = inf gives f itself."""

    def __init__(self, base: TargetPotential, sigma2: float):
        if not (sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        self.base = base
        self.sigma2 = float(sigma2)
        self.prec = 0.0 if math.isinf(sigma2) else 1.0 / sigma2
        super().__init__(base.d, base.mu + self.prec, base.L + self.prec, base.minimizer)

    @property
    def stage_mu(self) -> float:
        return self.mu

    @property
    def stage_L(self) -> float:
        return self.L

    def _value(self, x):
        return 0.5 * self.prec * np.sum(x * x, axis=-1) + self.base.value(x)

    def _grad(self, x):
        return self.prec * x + self.base.grad(x)

    def describe(self):
        return {"name": "stage", "sigma2": self.sigma2, "base": self.base.describe()}


def make_annealed_stage(base: TargetPotential, sigma2: float) -> AnnealStagePotential:
    return AnnealStagePotential(base, sigma2)


class StackedStagePotential(TargetPotential):
    """Several annealing stages evaluated row-wise on one batch.

    Row r of a batch uses f(x) + prec_r |x|^2 / 2 where ``precs`` holds one
    precision per stage and rows cycle through the stages (r mod B). The
    scalar mu and L are the extremes over stages; ``row_L`` gives the per-row
    smoothness that samplers use for their friction scaling.
    """

    def __init__(self, base: TargetPotential, precs, n: int):
        precs = np.asarray(precs, dtype=float)
        if precs.ndim != 1 or precs.size == 0 or np.any(precs < 0) or not np.all(np.isfinite(precs)):
            raise ValueError("precs must be a non-empty vector of finite non-negative values")
        self.base = base
        self.precs = precs
        self.n = int(n)
        self.row_prec = np.tile(precs, self.n)[:, None]
        self.row_L = base.L + self.row_prec
        super().__init__(base.d, base.mu + precs.min(), base.L + precs.max(), base.minimizer)

    def _rows(self, x):
        if x.ndim != 2 or x.shape[0] != self.row_prec.shape[0]:
            raise ValueError(f"stacked potential expects {self.row_prec.shape[0]} rows, got {x.shape}")
        return x

    def _value(self, x):
        x = self._rows(x)
        return 0.5 * self.row_prec[:, 0] * np.sum(x * x, axis=-1) + self.base.value(x)

    def _grad(self, x):
        x = self._rows(x)
        return self.row_prec * x + self.base.grad(x)

    def describe(self):
        return {"name": "stacked_stage", "precs": self.precs.tolist(), "base": self.base.describe()}


class QueryCounter:
    """Thread-safe value/gradient query counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value_queries = 0
        self.grad_queries = 0

    def add(self, value: int = 0, grad: int = 0):
        with self._lock:
            self.value_queries += int(value)
            self.grad_queries += int(grad)

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.value_queries, self.grad_queries


class CountingPotential(TargetPotential):
    """Forwards to a wrapped potential and counts every evaluated point."""

    def __init__(self, inner: TargetPotential, counter: QueryCounter | None = None):
        self.inner = inner
        self.counter = counter if counter is not None else QueryCounter()
        super().__init__(inner.d, inner.mu, inner.L, inner.minimizer)

    def _value(self, x):
        self.counter.add(value=_n_rows(x))
        return self.inner.value(x)

    def _grad(self, x):
        self.counter.add(grad=_n_rows(x))
        return self.inner.grad(x)

    def log_z(self):
        return self.inner.log_z()

    def describe(self):
        return self.inner.describe()


def wrap_counting(p: TargetPotential) -> CountingPotential:
    return CountingPotential(p)
