"""Multilevel Monte Carlo: level planning and the telescoping estimator.

The estimator of E g under a target is

    R = mean g(X^{eta_0}) + sum_{j=1}^k mean [g(X^{eta_j}) - g(X^{eta_{j-1}})]

where level j >= 1 draws synchronously coupled pairs with coarse step
eta_{j-1} and fine step eta_j = eta_{j-1} / 2.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import RngStream, as_generator
from .samplers import n_steps


class MlmcError(RuntimeError):
    pass


@dataclass(frozen=True)
class VarianceModel:
    """F(eta) = sum_m A_m eta^beta_m, a bound on E|X^eta - X^0|^2."""

    terms: tuple

    def __post_init__(self):
        terms = tuple((float(a), float(b)) for a, b in self.terms)
        if not terms:
            raise ValueError("variance model needs at least one term")
        for a, b in terms:
            if a < 0 or not math.isfinite(a):
                raise ValueError(f"coefficients must be finite and >= 0, got {a}")
            if not b > 1:
                raise ValueError(f"exponents must exceed 1, got {b}")
        object.__setattr__(self, "terms", terms)

    def __call__(self, eta):
        return sum(a * eta**b for a, b in self.terms)

    def to_dict(self):
        return {"terms": [list(t) for t in self.terms]}


@dataclass(frozen=True)
class LevelPlan:
    eta0: float
    k: int
    etas: tuple
    Ns: tuple
    T: float
    eps_b: float
    eps_sigma: float
    L_g: float = 1.0
    c: float = 1.0
    capped: bool = False
    planned_k: int | None = None
    planned_Ns: tuple | None = None

    def steps(self, j: int) -> int:
        return n_steps(self.T, self.etas[j])

    def to_dict(self):
        out = {"eta0": self.eta0, "k": self.k, "etas": list(self.etas), "Ns": list(self.Ns),
               "T": self.T, "eps_b": self.eps_b, "eps_sigma": self.eps_sigma,
               "L_g": self.L_g, "c": self.c, "capped": self.capped}
        if self.capped:
            out["planned_k"] = self.planned_k
            out["planned_Ns"] = list(self.planned_Ns)
        return out


def _solve_eta0(model, target, eta_max):
    if model(eta_max) <= target:
        return float(eta_max)
    lo, hi = 0.0, float(eta_max)
    while hi - lo > 1e-9 * hi:
        mid = 0.5 * (lo + hi)
        if model(mid) > target:
            hi = mid
        else:
            lo = mid
    return lo


@dataclass(frozen=True)
class PlanSpec:
    """Per-stage ingredients of a level plan."""

    model: VarianceModel
    L_g: float
    c: float
    eta_max: float
    T_of_eps: object


def plan_levels(model: VarianceModel, L_g, c, eps_b, eps_sigma, eta_max, T_of_eps,
                C_F: float = 4.0, max_k: int = 60) -> LevelPlan:
    """Level geometry meeting a bias budget eps_b and a deviation budget eps_sigma.

    eta_0 solves F(eta_0) = c/4 (capped at eta_max), k is the first level with
    F(eta_k) <= eps_b^2 / (4 L_g^2), and
    N_j = ceil(4 C_F L_g^2 / eps_sigma^2 * sqrt(F(eta_0) eta_j F(eta_j) / eta_0)).
    When eta_max binds, F(eta_0) < c/4 and c/4 is used in its place, since
    the level-0 variance is still of order c L_g^2.
    The shared horizon T_of_eps(eps_b / L_g) is rounded up to a multiple of eta_0
    so that every level, coupled or not, takes a whole number of steps.
    """
    return plan_levels_shared([PlanSpec(model, L_g, c, eta_max, T_of_eps)], eps_b, eps_sigma,
                              C_F, max_k)


def plan_levels_shared(specs, eps_b, eps_sigma, C_F: float = 4.0, max_k: int = 60) -> LevelPlan:
    """One level geometry valid for every stage in ``specs``.

    Uses the smallest eta_0, the deepest level any stage needs, the largest
    N_j any stage needs at the shared step sizes and the longest horizon.
    With a single spec this is exactly the per-stage plan.
    """
    if not (eps_b > 0 and eps_sigma > 0):
        raise ValueError("eps_b and eps_sigma must be positive")
    if not specs:
        raise ValueError("need at least one plan spec")
    for sp in specs:
        if not (sp.L_g > 0 and sp.c > 0 and sp.eta_max > 0):
            raise ValueError("L_g, c and eta_max must be positive")
    eta0 = min(_solve_eta0(sp.model, sp.c / 4, sp.eta_max) for sp in specs)
    k = 0
    for sp in specs:
        target = eps_b**2 / (4 * sp.L_g**2)
        while sp.model(eta0 / 2**k) > target:
            k += 1
            if k > max_k:
                raise ValueError(f"bias budget needs more than {max_k} levels")
    etas = tuple(eta0 / 2**j for j in range(k + 1))
    Ns = []
    for j, e in enumerate(etas):
        need = 1
        for sp in specs:
            # level-0 variance is governed by c even when eta_max caps eta_0
            F0 = max(sp.model(eta0), sp.c / 4)
            Fj = F0 if j == 0 else sp.model(e)
            pref = 4 * C_F * sp.L_g**2 / eps_sigma**2
            need = max(need, math.ceil(pref * math.sqrt(F0 * e * Fj / eta0)))
        Ns.append(need)
    T_raw = max(sp.T_of_eps(eps_b / sp.L_g) for sp in specs)
    T = max(1, math.ceil(T_raw / eta0 - 1e-9)) * eta0
    L_g = max(sp.L_g for sp in specs)
    c = min(sp.c for sp in specs)
    return LevelPlan(eta0, k, etas, tuple(Ns), T, eps_b, eps_sigma, L_g, c)


def apply_caps(plan: LevelPlan, max_levels=None, max_level0_samples=None, min_samples=2) -> LevelPlan:
    """Desk-scale caps: truncate the level count and scale all N_j by one factor.

    Scaling keeps the ratios N_j / N_0 of the planned allocation.
    """
    k, Ns = plan.k, list(plan.Ns)
    if max_levels is not None and k > max_levels:
        k = int(max_levels)
        Ns = Ns[: k + 1]
    if max_level0_samples is not None and Ns[0] > max_level0_samples:
        f = max_level0_samples / Ns[0]
        Ns = [max(min_samples, math.ceil(n * f)) for n in Ns]
        Ns[0] = int(max_level0_samples)
    if k == plan.k and tuple(Ns) == plan.Ns:
        return plan
    return replace(plan, k=k, etas=plan.etas[: k + 1], Ns=tuple(Ns), capped=True,
                   planned_k=plan.k, planned_Ns=plan.Ns)


def predicted_queries(plan: LevelPlan, grads_per_step: int = 1) -> int:
    """Exact gradient-query count of ``mlmc_estimate`` for this plan."""
    total = plan.Ns[0] * plan.steps(0)
    for j in range(1, plan.k + 1):
        total += plan.Ns[j] * (plan.steps(j) + plan.steps(j - 1))
    return int(total * grads_per_step)


@dataclass
class MlmcEstimate:
    r_hat: float
    level_means: list
    level_variances: list
    Ns: list
    queries: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"r_hat": self.r_hat, "level_means": self.level_means,
                "level_variances": self.level_variances, "Ns": self.Ns, "queries": self.queries}


def _blocks(n, size):
    return [(b, min(size, n - b * size)) for b in range((n + size - 1) // size)]


def _run_blocks(work, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [work(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(work, items))


def _checked(vals, level, offset):
    vals = np.asarray(vals, dtype=float)
    bad = np.argwhere(~np.isfinite(vals))
    if bad.size:
        raise MlmcError(f"non-finite g value at level {level}, sample {offset + bad[0][0]}")
    return vals


def _to_float(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a.tolist()


def mlmc_estimate(coupled_runner, single_runner, g, plan: LevelPlan, rng,
                  counter=None, threads: int = 1, block_size: int = 4096) -> MlmcEstimate:
    """Evaluate the telescoping estimator.

    single_runner(n, eta, T, gen) -> (n, d) endpoints at step eta.
    coupled_runner(n, eta, T, gen) -> (x_fine, x_coarse) with coarse step eta.
    g maps an (n, d) array to n values, or to an (n, B) array when B stages
    share one batch; means and variances are then per column. Samples are grouped into blocks of
    ``block_size``; block b of level j draws from stream path (j, b), so the
    result does not depend on ``threads``.
    """
    if not isinstance(rng, RngStream):
        rng = RngStream(int(as_generator(rng).integers(2**63)))
    before = counter.snapshot()[1] if counter is not None else None
    means, variances = [], []
    for j in range(plan.k + 1):
        n = plan.Ns[j]

        def work(item, j=j):
            b, size = item
            gen = rng.child(j, b).generator()
            if j == 0:
                return _checked(g(single_runner(size, plan.etas[0], plan.T, gen)), j, b * block_size)
            fine, coarse = coupled_runner(size, plan.etas[j - 1], plan.T, gen)
            gf = _checked(g(fine), j, b * block_size)
            gc = _checked(g(coarse), j, b * block_size)
            return gf - gc

        vals = np.concatenate(_run_blocks(work, _blocks(n, block_size), threads))
        means.append(_to_float(np.mean(vals, axis=0)))
        variances.append(_to_float(np.var(vals, axis=0, ddof=1)) if n > 1 else _to_float(0.0 * vals[0]))
    r_hat = 0.0 * np.asarray(means[0])
    for m in means:
        r_hat = r_hat + np.asarray(m)
    r_hat = _to_float(r_hat)
    queries = counter.snapshot()[1] - before if counter is not None else None
    return MlmcEstimate(r_hat, means, variances, list(plan.Ns), queries)


def calibrate_variance_model(coupled_runner, etas, n_pairs, T, rng, exponent=None):
    """Fit E|x_fine - x_coarse|^2 ~ A eta^beta from pilot coupled runs.

    Returns (A, beta, mean_square_gaps). With ``exponent`` given, beta is held
    fixed and only A is fitted (least squares in log space). The result is
    advisory and never replaces configured constants.
    """
    if not isinstance(rng, RngStream):
        rng = RngStream(int(as_generator(rng).integers(2**63)))
    gaps = []
    for i, eta in enumerate(etas):
        fine, coarse = coupled_runner(n_pairs, eta, T, rng.child(i).generator())
        gaps.append(float(np.mean(np.sum((fine - coarse) ** 2, axis=-1))))
    le, lg = np.log(etas), np.log(gaps)
    if exponent is None:
        beta, logA = np.polyfit(le, lg, 1)
    else:
        beta = float(exponent)
        logA = float(np.mean(lg - beta * le))
    return float(np.exp(logA)), float(beta), gaps
