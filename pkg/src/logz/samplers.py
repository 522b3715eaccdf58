"""ULD, randomized-midpoint ULD and lazy MALA samplers, plus couplings.

Underdamped Langevin dynamics here is

    dx = v dt,   dv = -gamma v dt - u grad f(x) dt + sqrt(2 gamma u) dB

with gamma = 2 and u = 1/L fixed. The exponential integrator freezes the
gradient over a step and integrates the Ornstein-Uhlenbeck part exactly. The
Brownian path enters a step of length s only through the pair

    G = int_0^s e^{2r} dB_r,   H = int_0^s dB_r,

which is jointly Gaussian per coordinate.

Every routine is vectorized over chains: positions have shape (n, d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import as_generator

GAMMA = 2.0


class SamplerError(RuntimeError):
    """Raised when a chain produces a non-finite gradient or value."""

    def __init__(self, msg, position=None):
        super().__init__(msg)
        self.position = position


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.shape(self.x) != np.shape(self.v):
            raise ValueError(f"x and v shapes differ: {np.shape(self.x)} vs {np.shape(self.v)}")


@dataclass(frozen=True)
class GHPair:
    g: np.ndarray
    h: np.ndarray
    interval: float


@dataclass(frozen=True)
class UldParams:
    L: float
    eta: float
    T: float

    @property
    def gamma(self) -> float:
        return GAMMA

    @property
    def u(self) -> float:
        return 1.0 / self.L


@dataclass(frozen=True)
class CoupledPair:
    x_fine: np.ndarray
    x_coarse: np.ndarray
    eta: float


# ---------------------------------------------------------------- noise draws

def gh_covariance(s):
    """(Var g, Cov(g, h), Var h) for a window of length s starting at 0."""
    s = np.asarray(s, dtype=float)
    return np.expm1(4 * s) / 4, np.expm1(2 * s) / 2, s


def _gh_det(s):
    var_g, cov, var_h = gh_covariance(s)
    return var_g * var_h - cov**2


# det(s) / s = s^3/4 * sum_{m>=4} a_m s^{m-4}; the series avoids cancellation
_SERIES_A = np.array([
    4.0 ** (m - 1) / math.factorial(m - 1) - (4.0**m - 2.0 ** (m + 1)) / math.factorial(m)
    for m in range(4, 20)
])


def _gh_resid_var(s):
    """Var(g | h) = det / s, accurate for small s."""
    s = np.asarray(s, dtype=float)
    acc = np.zeros_like(s)
    for a in _SERIES_A[::-1]:
        acc = acc * s + a
    series = 0.25 * s**3 * acc
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = _gh_det(s) / np.where(s > 0, s, 1.0)
    return np.where(s < 0.1, series, direct)


@lru_cache(maxsize=256)
def _gh_coeffs(s: float):
    """(sqrt(Var h), E[g|h] / h, sqrt(Var(g|h))) for a window of length s."""
    if s == 0:
        return 0.0, 0.0, 0.0
    det = float(_gh_det(s))
    if det < -1e-12:
        raise ValueError("G/H covariance is not positive semidefinite")
    resid = float(_gh_resid_var(np.array(s)))
    return math.sqrt(s), math.expm1(2 * s) / (2 * s), math.sqrt(max(resid, 0.0))


def draw_gh_interval(a, b, rng, size) -> GHPair:
    """Draw (int_a^b e^{2r} dB_r, int_a^b dB_r) per coordinate.

    ``a`` and ``b`` may be scalars or arrays broadcastable to ``size``
    (per-chain windows, e.g. shape (n, 1)).
    """
    gen = as_generator(rng)
    size = tuple(np.atleast_1d(size))
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        a, s = float(a), float(b) - float(a)
        if s < 0 or a < 0:
            raise ValueError("window must satisfy 0 <= a <= b")
        sq, slope, rv = _gh_coeffs(s)
        z = gen.standard_normal((2,) + size)
        h = sq * z[0]
        g = slope * h + rv * z[1]
        if a != 0:
            g *= math.exp(2 * a)
        return GHPair(g, h, s)
    a = np.asarray(a, dtype=float)
    s = np.asarray(b, dtype=float) - a
    if np.any(s < 0) or np.any(a < 0):
        raise ValueError("window must satisfy 0 <= a <= b")
    if _gh_det(np.array([s.min(), s.max()])).min() < -1e-12:
        raise ValueError("G/H covariance is not positive semidefinite")
    z = gen.standard_normal((2,) + size)
    pos = s > 0
    safe = np.where(pos, s, 1.0)
    slope = np.where(pos, np.expm1(2 * safe) / (2 * safe), 0.0)
    h = np.sqrt(s) * z[0]
    g = slope * h + np.sqrt(np.maximum(_gh_resid_var(s), 0.0)) * z[1]
    g *= np.exp(2 * a)
    return GHPair(g, h, s)


def draw_gh(s, rng, size) -> GHPair:
    """Draw the (G, H) pair for a step of length s; ``size`` is (n, d) or (d,)."""
    if s < 0:
        raise ValueError(f"interval must be non-negative, got {s}")
    return draw_gh_interval(0.0, s, rng, size)


# ----------------------------------------------------------------- ULD steps

def _step_L(stage):
    """Smoothness used for u = 1/L; stacked stages carry one value per row."""
    return getattr(stage, "row_L", stage.L)


def _checked_grad(stage, x):
    g = stage.grad(x)
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g).all(axis=-1)) if g.ndim == 2 else None
        pos = x[bad[0, 0]] if bad is not None and len(bad) else x
        raise SamplerError(f"non-finite gradient at {np.array2string(np.asarray(pos), precision=4)}", pos)
    return g


def _uld_update(x, v, grad, L, eta, g, h):
    e = math.exp(-2 * eta)
    one_m = -math.expm1(-2 * eta)
    u = 1.0 / L
    sq = 1.0 / np.sqrt(L)
    v_new = e * v - 0.5 * u * one_m * grad + 2 * sq * e * g
    x_new = x + 0.5 * one_m * v - 0.5 * u * (eta - 0.5 * one_m) * grad + sq * (h - e * g)
    return x_new, v_new


def uld_step(p: PhasePoint, stage, params: UldParams, gh: GHPair) -> PhasePoint:
    """One exponential-integrator ULD step (one gradient query per chain)."""
    if np.shape(p.x)[-1] != stage.d:
        raise ValueError(f"state dimension {np.shape(p.x)[-1]} does not match potential d={stage.d}")
    if not np.allclose(gh.interval, params.eta, rtol=1e-12, atol=0):
        raise ValueError("noise interval must equal the step size")
    grad = _checked_grad(stage, p.x)
    x, v = _uld_update(p.x, p.v, grad, params.L, params.eta, gh.g, gh.h)
    return PhasePoint(x, v)


def n_steps(T: float, eta: float) -> int:
    """Number of steps of size eta covering horizon T (T must be a multiple)."""
    if T <= 0:
        return 0
    m = T / eta
    k = round(m)
    if k == 0:
        return 1
    if abs(m - k) > 1e-9 * max(1.0, m):
        raise ValueError(f"horizon T={T} is not a multiple of eta={eta}")
    return int(k)


def _init(x0, d, n):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != d:
        raise ValueError(f"x0 has dimension {x0.shape[-1]}, potential has d={d}")
    if n is None:
        n = 1 if x0.ndim == 1 else x0.shape[0]
    x = np.broadcast_to(x0, (n, d)).copy()
    return x, np.zeros_like(x)


def uld_chain(x0, stage, eta, T, rng, n=None, trace=False):
    """Run n ULD chains from (x0, 0) for T/eta steps; returns final PhasePoint.

    With ``trace=True`` also returns an array of shape (steps, n, 1 + 2d)
    holding (t, x, v) after every step.
    """
    gen = as_generator(rng)
    x, v = _init(x0, stage.d, n)
    steps = n_steps(T, eta)
    rows = []
    for i in range(steps):
        gh = draw_gh(eta, gen, x.shape)
        x, v = _uld_update(x, v, _checked_grad(stage, x), _step_L(stage), eta, gh.g, gh.h)
        if trace:
            rows.append(_trace_row((i + 1) * eta, x, v))
    out = PhasePoint(x, v)
    return (out, np.array(rows)) if trace else out


def _trace_row(t, x, v):
    return np.concatenate([np.full((x.shape[0], 1), t), x, v], axis=1)


def combine_uld_noise(first: GHPair, second: GHPair, eta: float) -> GHPair:
    """Coarse-step noise from two consecutive half-step draws."""
    return GHPair(first.g + math.exp(eta) * second.g, first.h + second.h, eta)


def uld_coupled_run(x0, stage, eta, T, rng, n=None) -> CoupledPair:
    """Synchronously coupled ULD chains with steps eta/2 (fine) and eta (coarse)."""
    gen = as_generator(rng)
    xf, vf = _init(x0, stage.d, n)
    xc, vc = xf.copy(), vf.copy()
    half = 0.5 * eta
    L = _step_L(stage)
    for _ in range(n_steps(T, eta)):
        gh1 = draw_gh(half, gen, xf.shape)
        gh2 = draw_gh(half, gen, xf.shape)
        xf, vf = _uld_update(xf, vf, _checked_grad(stage, xf), L, half, gh1.g, gh1.h)
        xf, vf = _uld_update(xf, vf, _checked_grad(stage, xf), L, half, gh2.g, gh2.h)
        ghc = combine_uld_noise(gh1, gh2, eta)
        xc, vc = _uld_update(xc, vc, _checked_grad(stage, xc), L, eta, ghc.g, ghc.h)
    return CoupledPair(xf, xc, eta)


# ----------------------------------------------------------------- RMM steps

def _rmm_update(x, v, stage, L, eta, alpha, g1, h1, g2, h2):
    u = 1.0 / L
    sq = 1.0 / np.sqrt(L)
    ea = np.exp(-2 * alpha * eta)
    one_a = -np.expm1(-2 * alpha * eta)
    y = x + 0.5 * one_a * v - 0.5 * u * (alpha * eta - 0.5 * one_a) * _checked_grad(stage, x) \
        + sq * (h1 - ea * g1)
    gy = _checked_grad(stage, y)
    e = math.exp(-2 * eta)
    one_m = -math.expm1(-2 * eta)
    e_rest = np.exp(-2 * (1 - alpha) * eta)
    gsum = g1 + g2
    x_new = x + 0.5 * one_m * v - 0.5 * u * eta * (1 - e_rest) * gy + sq * ((h1 + h2) - e * gsum)
    v_new = e * v - u * eta * e_rest * gy + 2 * sq * e * gsum
    return x_new, v_new


def rmm_step(p: PhasePoint, stage, params: UldParams, alpha, noise) -> PhasePoint:
    """One randomized-midpoint step; ``noise`` = (G1, H1, G2, H2).

    G1, H1 cover [0, alpha*eta] and G2, H2 cover [alpha*eta, eta] with the
    kernel e^{2r} measured from the start of the step. Two gradient queries.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if np.shape(p.x)[-1] != stage.d:
        raise ValueError(f"state dimension {np.shape(p.x)[-1]} does not match potential d={stage.d}")
    g1, h1, g2, h2 = noise
    x, v = _rmm_update(p.x, p.v, stage, params.L, params.eta, alpha, g1, h1, g2, h2)
    return PhasePoint(x, v)


def _draw_windows(starts, lengths, gen, size):
    """(G, H) pairs for a stack of per-chain windows in one vectorized pass.

    starts, lengths: arrays of shape (w, n, 1). Returns g, h of shape (w, n, d).
    """
    s = lengths
    if s.min() < 0:
        raise ValueError("window lengths must be non-negative")
    if _gh_det(np.array([s.min(), s.max()])).min() < -1e-12:
        raise ValueError("G/H covariance is not positive semidefinite")
    pos = s > 0
    safe = np.where(pos, s, 1.0)
    slope = np.where(pos, np.expm1(2 * safe) / (2 * safe), 0.0)
    z = gen.standard_normal((2,) + s.shape[:-1] + (size[-1],))
    h = np.sqrt(s) * z[0]
    g = (slope * h + np.sqrt(np.maximum(_gh_resid_var(s), 0.0)) * z[1]) * np.exp(2 * starts)
    return g, h


def draw_rmm_noise(alpha, eta, rng, size):
    """(G1, H1, G2, H2) for midpoint fraction alpha (shape broadcastable to size)."""
    gen = as_generator(rng)
    a = np.broadcast_to(np.asarray(alpha, dtype=float) * eta, (size[0], 1))
    g, h = _draw_windows(np.stack([np.zeros_like(a), a]), np.stack([a, eta - a]), gen, size)
    return g[0], h[0], g[1], h[1]


def rmm_chain(x0, stage, eta, T, rng, n=None, trace=False):
    gen = as_generator(rng)
    x, v = _init(x0, stage.d, n)
    rows = []
    for i in range(n_steps(T, eta)):
        alpha = gen.random((x.shape[0], 1))
        g1, h1, g2, h2 = draw_rmm_noise(alpha, eta, gen, x.shape)
        x, v = _rmm_update(x, v, stage, _step_L(stage), eta, alpha, g1, h1, g2, h2)
        if trace:
            rows.append(_trace_row((i + 1) * eta, x, v))
    out = PhasePoint(x, v)
    return (out, np.array(rows)) if trace else out


def combine_rmm_noise(alpha1, alpha2, heads, n1, n2, eta):
    """Coarse (alpha, G1, H1, G2, H2) from the two half-step draws.

    n1, n2 are (G1, H1, G2, H2) tuples of the first and second half steps,
    each relative to its own half-step start. ``heads`` selects the first
    half's midpoint.
    """
    g11, h11, g21, h21 = n1
    g12, h12, g22, h22 = n2
    ex = math.exp(eta)
    alpha = np.where(heads, 0.5 * alpha1, 0.5 * (1 + alpha2))
    G1 = np.where(heads, g11, g11 + g21 + ex * g12)
    H1 = np.where(heads, h11, h11 + h21 + h12)
    G2 = np.where(heads, g21 + ex * (g12 + g22), ex * g22)
    H2 = np.where(heads, h21 + h12 + h22, h22)
    return alpha, G1, H1, G2, H2


def rmm_coupled_run(x0, stage, eta, T, rng, n=None) -> CoupledPair:
    """Coupled RMM: two R^{eta/2} fine steps against one R^{eta} coarse step."""
    gen = as_generator(rng)
    xf, vf = _init(x0, stage.d, n)
    xc, vc = xf.copy(), vf.copy()
    half = 0.5 * eta
    L = _step_L(stage)
    m = xf.shape[0]
    for _ in range(n_steps(T, eta)):
        a1 = gen.random((m, 1))
        a2 = gen.random((m, 1))
        heads = gen.random((m, 1)) < 0.5
        w1, w2 = a1 * half, a2 * half
        zero = np.zeros_like(w1)
        g, h = _draw_windows(np.stack([zero, w1, zero, w2]),
                             np.stack([w1, half - w1, w2, half - w2]), gen, xf.shape)
        n1 = (g[0], h[0], g[1], h[1])
        n2 = (g[2], h[2], g[3], h[3])
        xf, vf = _rmm_update(xf, vf, stage, L, half, a1, *n1)
        xf, vf = _rmm_update(xf, vf, stage, L, half, a2, *n2)
        alpha, G1, H1, G2, H2 = combine_rmm_noise(a1, a2, heads, n1, n2, eta)
        xc, vc = _rmm_update(xc, vc, stage, L, eta, alpha, G1, H1, G2, H2)
    return CoupledPair(xf, xc, eta)


# ---------------------------------------------------------------------- MALA

@dataclass
class MalaResult:
    x: np.ndarray
    accepted: int
    active: int
    nonfinite_rejects: int
    trace: np.ndarray | None = None

    @property
    def value_queries(self) -> int:
        return self.x.shape[0] + self.active

    grad_queries = value_queries


def mala_log_accept(x, z, fx, gx, fz, gz, h):
    """Log Metropolis ratio for the Langevin proposal z ~ N(x - h gx, 2h I)."""
    fwd = np.sum((z - x + h * gx) ** 2, axis=-1)
    bwd = np.sum((x - z + h * gz) ** 2, axis=-1)
    return (-fz - bwd / (4 * h)) - (-fx - fwd / (4 * h))


def mala_chain(x0, stage, h, n, rng, n_chains=None, trace=False) -> MalaResult:
    """Half-lazy MALA from x0 for n iterations (vectorized over chains).

    The current point's f and grad f are cached, so an active iteration
    costs one value and one gradient query; lazy iterations cost nothing.
    """
    if not (h > 0):
        raise ValueError(f"step size must be positive, got {h}")
    gen = as_generator(rng)
    x, _ = _init(x0, stage.d, n_chains)
    m = x.shape[0]
    fx = np.atleast_1d(stage.value(x)).astype(float)
    gx = stage.grad(x)
    accepted = active = nonfinite = 0
    rows = []
    root = math.sqrt(2 * h)
    for it in range(int(n)):
        move = gen.random(m) >= 0.5
        noise = gen.standard_normal((m, stage.d))
        logu = np.log(gen.random(m))
        idx = np.flatnonzero(move)
        if idx.size:
            xa = x[idx]
            z = xa - h * gx[idx] + root * noise[idx]
            fz = np.atleast_1d(stage.value(z)).astype(float)
            gz = stage.grad(z)
            ok = np.isfinite(fz) & np.all(np.isfinite(gz), axis=-1)
            with np.errstate(invalid="ignore", over="ignore"):
                la = mala_log_accept(xa, z, fx[idx], gx[idx], fz, gz, h)
            acc = ok & np.isfinite(la) & (logu[idx] < np.minimum(0.0, la))
            nonfinite += int(np.sum(~ok))
            sel = idx[acc]
            x[sel] = z[acc]
            fx[sel] = fz[acc]
            gx[sel] = gz[acc]
            accepted += int(acc.sum())
            active += idx.size
        if trace:
            rows.append(np.concatenate([np.full((m, 1), it + 1), x], axis=1))
    return MalaResult(x, accepted, active, nonfinite, np.array(rows) if trace else None)


# ------------------------------------------------------- accuracy-driven setup

def _round_up(T, eta):
    if T < eta:
        return eta
    k = math.ceil(T / eta - 1e-9)
    return k * eta


def default_uld_params(stage, epsilon: float) -> tuple[float, float]:
    """(eta, T) for W2 accuracy epsilon on the given stage."""
    d, mu, kappa = stage.d, stage.mu, stage.kappa
    eta = epsilon * math.sqrt(mu / d) / (208 * kappa)
    T = 0.5 * kappa * math.log(48 * (d / mu) / epsilon)
    return eta, _round_up(T, eta)


def default_rmm_params(stage, epsilon: float, c: float = 0.1) -> tuple[float, float]:
    """(eta, T) for the randomized midpoint sampler at W2 accuracy epsilon."""
    d, mu, kappa = stage.d, stage.mu, stage.kappa
    lg = max(math.log(math.sqrt(d / mu) / epsilon), 1.0)
    r = mu / d
    eta = c * min(epsilon ** (1 / 3) * r ** (1 / 6) / (kappa ** (1 / 6) * lg ** (1 / 6)),
                  epsilon ** (2 / 3) * r ** (1 / 3) / lg ** (1 / 3))
    T = 2 * kappa * math.log(20 * (d / mu) / epsilon**2)
    return eta, _round_up(T, eta)
