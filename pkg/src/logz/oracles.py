"""Ground-truth values: Gaussian closed forms and trapezoid quadrature (d <= 3).

Everything here is deterministic and seed-free. Closed forms are computed in
log space and exponentiated only on output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .potentials import TargetPotential


def analytic_gaussian_Z(lambdas) -> float:
    """log Z for f(x) = sum_i lambda_i x_i^2 / 2."""
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lam.size == 0 or np.any(~(lam > 0)) or not np.all(np.isfinite(lam)):
        raise ValueError("lambdas must be positive and finite")
    return float(np.sum(0.5 * np.log(2 * np.pi / lam)))


def _inv(v):
    return 0.0 if math.isinf(v) else 1.0 / v


def log_gaussian_stage_ratio(s2, sigma_i_sq, sigma_ip1_sq, d) -> float:
    """log E_{rho_i} g_i for the base N(0, s2 I_d).

    With a = 1/sigma_i^2 + 1/s2 and b = 1/sigma_i^2 - 1/sigma_{i+1}^2 the
    ratio is (a / (a - b))^{d/2}; a - b = 1/sigma_{i+1}^2 + 1/s2 is formed
    directly to avoid cancellation.
    """
    if not (s2 > 0 and sigma_i_sq > 0 and sigma_ip1_sq > 0 and d >= 1):
        raise ValueError("variances and d must be positive")
    a = 1 / sigma_i_sq + 1 / s2
    a_minus_b = _inv(sigma_ip1_sq) + 1 / s2
    if not a_minus_b > 0 or a - a_minus_b >= a:
        raise ValueError("tilt is not integrable (b >= a)")
    return 0.5 * d * (math.log(a) - math.log(a_minus_b))


def gaussian_stage_ratio(s2, sigma_i_sq, sigma_ip1_sq, d) -> float:
    return math.exp(log_gaussian_stage_ratio(s2, sigma_i_sq, sigma_ip1_sq, d))


def log_gaussian_stage_z(s2, sigma_sq, d) -> float:
    """log Z_i for f_i = |x|^2/(2 sigma^2) + |x|^2/(2 s2); sigma_sq = inf gives the base."""
    prec = _inv(sigma_sq) + 1 / s2
    return 0.5 * d * math.log(2 * math.pi / prec)


def log_gaussian_variance_ratio(s2, sigma2, alpha, d) -> float:
    """log of E e^{-(1+a)q} E e^{-(1-a)q} / (E e^{-q})^2, q = |x|^2/(2 sigma2), x ~ N(0, s2 I).

    Uses E exp(-c |x|^2 / 2) = (1 + c s2)^{-d/2}.
    """
    if not (s2 > 0 and sigma2 > 0):
        raise ValueError("variances must be positive")
    if not (0 <= alpha <= 0.5):
        raise ValueError("alpha must lie in [0, 1/2]")
    t = s2 / sigma2
    return -0.5 * d * (math.log1p((1 + alpha) * t) + math.log1p((1 - alpha) * t)
                       - 2 * math.log1p(t))


def gaussian_variance_ratio(s2, sigma2, alpha, d) -> float:
    return math.exp(log_gaussian_variance_ratio(s2, sigma2, alpha, d))


def log_last_stage_second_moment(mu, sigma_sq, d) -> float:
    """log E g^2 / (E g)^2 for the last stage of the base N(0, I/mu).

    Here rho has precision 1/sigma^2 + mu and g = exp(|x|^2 / (2 sigma^2));
    with y = 1/(mu sigma^2) the ratio is (1 - y^2)^{-d/2}.
    """
    if not (mu > 0 and sigma_sq > 0):
        raise ValueError("mu and sigma_sq must be positive")
    y = 1 / (mu * sigma_sq)
    if y >= 1:
        raise ValueError("E g^2 is infinite unless sigma^2 > 1/mu")
    return -0.5 * d * math.log1p(-y * y)


@dataclass(frozen=True)
class TruncationMass:
    """Relative truncation quantities of h = min(g, g_r(r)) on a Gaussian stage."""

    tail_mass: float  # int_{|x| >= r} g drho / E g
    bias: float       # |E(h - g)| / E g
    r_bar: float      # E_{rho'} |x| under the g-tilted law
    bound: float      # exp(-(1/(sigma^2 (1 + alpha)) + mu) (r - r_bar)^2 / 2)


def gaussian_truncation(s2, sigma_sq, alpha, r, d) -> TruncationMass:
    """Closed-form truncation mass for base N(0, s2 I) at stage variance sigma_sq.

    The stage law rho has precision p = 1/sigma^2 + 1/s2. Tilting by
    g = exp(|x|^2 / (2 sigma^2 (1 + 1/alpha))) gives rho' = N(0, I/p') with
    p' = 1/(sigma^2 (1 + alpha)) + 1/s2; alpha = inf is allowed.
    """
    if not (s2 > 0 and sigma_sq > 0 and r >= 0 and d >= 1):
        raise ValueError("invalid truncation parameters")
    mu = 1 / s2
    p = 1 / sigma_sq + mu
    inv_alpha = 0.0 if math.isinf(alpha) else 1 / alpha
    coef = 1 / (2 * sigma_sq * (1 + inv_alpha))
    p_tilt = (0.0 if math.isinf(alpha) else 1 / (sigma_sq * (1 + alpha))) + mu
    log_eg = 0.5 * d * (math.log(p) - math.log(p_tilt))
    tail = float(stats.chi2.sf(p_tilt * r * r, d))
    # E_rho[cap 1{|x|>=r}] / E g with cap = g_r(r)
    capped = math.exp(coef * r * r - log_eg) * float(stats.chi2.sf(p * r * r, d))
    bias = max(0.0, tail - capped)
    r_bar = math.sqrt(2 / p_tilt) * math.exp(special.gammaln((d + 1) / 2) - special.gammaln(d / 2))
    if r >= r_bar:
        bound = math.exp(-0.5 * p_tilt * (r - r_bar) ** 2)
    else:
        bound = 1.0
    return TruncationMass(tail, bias, r_bar, bound)


# ---------------------------------------------------------------- quadrature

@dataclass
class QuadratureResult:
    z: float
    log_z: float
    h: float
    R0: float
    points: int
    converged: bool
    history: list

    def to_dict(self):
        return {"z": self.z, "log_z": self.log_z, "h": self.h, "R0": self.R0,
                "points": self.points, "converged": self.converged,
                "status": "converged" if self.converged else "unconverged",
                "history": self.history}


def quadrature_box(d, mu, eps) -> float:
    """R0 = 2 sqrt(d/mu) log(1/eps)."""
    return 2 * math.sqrt(d / mu) * math.log(1 / eps)


def _trapezoid_log(f, R0, n, d, chunk=1 << 18):
    """log of the trapezoid sum of exp(-f) on n points per axis over [-R0, R0]^d."""
    axis = np.linspace(-R0, R0, n)
    h = axis[1] - axis[0]
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    logw = np.log(w)
    total = n**d
    # flat index -> coordinates, chunked to bound memory
    vals = np.empty(total)
    lw = np.empty(total)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        coords = np.empty((idx.size, d))
        lws = np.zeros(idx.size)
        rem = idx
        for ax in range(d - 1, -1, -1):
            k = rem % n
            rem = rem // n
            coords[:, ax] = axis[k]
            lws += logw[k]
        vals[start:start + idx.size] = -np.asarray(f.value(coords), dtype=float)
        lw[start:start + idx.size] = lws
    return float(special.logsumexp(vals + lw))


def trapezoid_Z(f: TargetPotential, eps: float, h_override=None, R0_override=None,
                max_points: int = 2**24, n0: int = 9) -> QuadratureResult:
    """Trapezoid estimate of Z = int exp(-f) over [-R0, R0]^d, d <= 3.

    Without ``h_override`` the grid is refined by halving h (n -> 2n - 1
    points per axis) until two successive estimates agree to eps/4
    relative, or until the next grid would exceed ``max_points``.
    """
    d = f.d
    if d > 3:
        raise ValueError(f"trapezoid quadrature supports d <= 3, got d={d}")
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")
    R0 = float(R0_override) if R0_override is not None else quadrature_box(d, f.mu, eps)
    if h_override is not None:
        n = max(2, math.ceil(2 * R0 / h_override - 1e-12) + 1)
        if n**d > max_points:
            raise ValueError(f"grid of {n**d} points exceeds max_points={max_points}")
        lz = _trapezoid_log(f, R0, n, d)
        return QuadratureResult(math.exp(lz), lz, 2 * R0 / (n - 1), R0, n**d, True, [lz])
    n = n0
    lz = _trapezoid_log(f, R0, n, d)
    history = [lz]
    converged = False
    while (2 * n - 1) ** d <= max_points:
        n = 2 * n - 1
        new = _trapezoid_log(f, R0, n, d)
        history.append(new)
        done = abs(math.expm1(new - lz)) < eps / 4
        lz = new
        if done:
            converged = True
            break
    return QuadratureResult(math.exp(lz), lz, 2 * R0 / (n - 1), R0, n**d, converged, history)
