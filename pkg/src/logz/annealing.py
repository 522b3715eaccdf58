"""Annealing ladder and the two normalizing-constant pipelines.

Stage potentials are f_i(x) = |x|^2 / (2 sigma_i^2) + f(x) with Z_i their
normalizing constants. With sigma_{M+1} = inf we have Z_{M+1} = Z and

    Z = Z_1 * prod_i R_i,   R_i = E_{rho_i} g_i,
    g_i(x) = exp((1/sigma_i^2 - 1/sigma_{i+1}^2) |x|^2 / 2).

Z_1 is replaced by the Gaussian factor (2 pi sigma_1^2)^{d/2}, which is
accurate when sigma_1 is tiny. The multilevel pipeline estimates each R_i
with coupled Langevin chains on a truncated ratio h_i = min(g_i, cap); the
baseline pipeline averages g_i over MALA draws.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .mlmc import (LevelPlan, MlmcEstimate, PlanSpec, VarianceModel, apply_caps, mlmc_estimate,
                   plan_levels_shared, predicted_queries)
from .potentials import (CountingPotential, StackedStagePotential, TargetPotential,
                         make_annealed_stage, wrap_counting)
from .rng import RngStream
from .samplers import (default_rmm_params, default_uld_params, mala_chain, n_steps,
                       rmm_chain, rmm_coupled_run, uld_chain, uld_coupled_run)

ULD_VARIANCE_CONST = 2662.4  # from the synchronous-coupling error bound for ULD


class EstimationError(RuntimeError):
    """A stage failed; ``report`` holds everything computed before the failure."""

    def __init__(self, msg, stage=None, report=None):
        super().__init__(msg)
        self.stage = stage
        self.report = report


# ------------------------------------------------------------------ settings

@dataclass(frozen=True)
class PipelineSettings:
    """Constants and optional desk-scale caps (None means uncapped)."""

    uld_variance_const: float = ULD_VARIANCE_CONST
    rmm_variance_const: float = 1.0
    C_F: float = 4.0
    eta_max_factor: float = 0.1
    rmm_step_c: float = 0.1
    mala_step_c: float = 0.5
    mala_steps_C: float = 1.0
    block_size: int = 4096
    threads: int = 1
    max_stages: int | None = None
    max_levels: int | None = None
    max_level0_samples: int | None = None
    max_radius_samples: int | None = None
    eta_floor: float | None = None
    mala_max_samples: int | None = None
    max_horizon_kappa: float | None = None
    stage_batch: int = 1

    CAP_FIELDS = ("max_stages", "max_levels", "max_level0_samples", "max_radius_samples",
                  "eta_floor", "mala_max_samples", "max_horizon_kappa")

    def __post_init__(self):
        if int(self.stage_batch) < 1:
            raise ValueError("stage_batch must be >= 1")
        if int(self.threads) < 1:
            raise ValueError("threads must be >= 1")
        if int(self.block_size) < 1:
            raise ValueError("block_size must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "PipelineSettings":
        """Laptop-scale profile: calibrated variance constants plus caps."""
        base = dict(uld_variance_const=0.05, rmm_variance_const=0.05, max_levels=3,
                    max_level0_samples=1024, max_radius_samples=256, eta_floor=0.05,
                    mala_max_samples=10_000, max_horizon_kappa=10.0, stage_batch=64)
        base.update(overrides)
        return cls(**base)

    def caps(self) -> dict:
        return {k: getattr(self, k) for k in self.CAP_FIELDS}

    def to_dict(self) -> dict:
        # threads only changes scheduling, never results, so reports omit it
        out = asdict(self)
        out.pop("threads")
        return out


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True)
class AnnealSchedule:
    d: int
    mu: float
    L: float
    eps: float
    sigma1_sq: float
    alpha: float
    M: int
    sigma_max_sq: float
    capped: bool = False

    @property
    def sigmas_sq(self) -> np.ndarray:
        return self.sigma1_sq * (1 + self.alpha) ** np.arange(self.M)

    def sigma_sq(self, i: int) -> float:
        """sigma_i^2 for 1 <= i <= M, inf for i = M + 1."""
        if i == self.M + 1:
            return math.inf
        return float(self.sigma1_sq * (1 + self.alpha) ** (i - 1))

    def alpha_eff(self, i: int) -> float:
        return math.inf if i == self.M else self.alpha

    def to_dict(self):
        return {"sigma1_sq": self.sigma1_sq, "alpha": self.alpha, "M": self.M,
                "sigma_max_sq": self.sigma_max_sq, "capped": self.capped}


def _check_eps(eps):
    if not (0 < eps <= 0.5):
        raise ValueError(f"eps must lie in (0, 1/2], got {eps}")


def build_schedule(d: int, mu: float, L: float, eps: float, max_stages=None) -> AnnealSchedule:
    """Geometric ladder sigma_i^2 = sigma_1^2 (1 + alpha)^{i-1}, i = 1..M."""
    _check_eps(eps)
    if not (0 < mu <= L):
        raise ValueError("need 0 < mu <= L")
    lg = math.log(8 / eps)
    sigma1_sq = eps / (8 * d * L)
    alpha = min(math.log(2) / (2 * math.sqrt(d) * lg), 0.25)
    sigma_max_sq = 4 * max(math.sqrt(d), math.sqrt(lg)) * max(1.0, 1 / math.sqrt(mu)) / mu
    span = math.log(sigma_max_sq / sigma1_sq)
    M = max(1, math.ceil(span / math.log1p(alpha)) + 1)
    capped = False
    if max_stages is not None and M > max_stages:
        M = int(max_stages)
        if M >= 2:
            alpha = math.expm1(span / (M - 1))
        capped = True
    return AnnealSchedule(d, mu, L, eps, sigma1_sq, alpha, M, sigma_max_sq, capped)


def log_estimate_z1(schedule: AnnealSchedule, d=None) -> float:
    d = schedule.d if d is None else d
    return 0.5 * d * math.log(2 * math.pi * schedule.sigma1_sq)


def estimate_z1(schedule: AnnealSchedule, d=None) -> float:
    """(2 pi sigma_1^2)^{d/2}, assembled in log space."""
    return math.exp(log_estimate_z1(schedule, d))


@dataclass(frozen=True)
class ErrorBudget:
    eps: float
    M: int

    @property
    def eps1(self) -> float:
        return self.eps / 8

    @property
    def eps_b(self) -> float:
        return self.eps / (16 * self.M)

    @property
    def eps_sigma(self) -> float:
        return self.eps / (128 * math.sqrt(self.M))


# ---------------------------------------------------------- truncated ratios

@dataclass(frozen=True)
class TruncatedRatio:
    """h(x) = min(g(x), cap) with g(x) = exp(|x|^2 / (2 sigma^2 (1 + 1/alpha)))."""

    sigma_i_sq: float
    alpha_eff: float
    r_plus: float
    L_h: float

    @property
    def coef(self) -> float:
        # 1 / (2 sigma^2 (1 + 1/alpha)); alpha = inf gives 1 / (2 sigma^2)
        inv = 0.0 if math.isinf(self.alpha_eff) else 1.0 / self.alpha_eff
        return 1.0 / (2 * self.sigma_i_sq * (1 + inv))

    @property
    def log_cap(self) -> float:
        return self.coef * self.r_plus**2

    @property
    def cap(self) -> float:
        return _safe_exp(self.log_cap)

    @property
    def exact_lipschitz(self) -> float:
        return 2 * self.coef * self.r_plus * self.cap

    def log_g(self, x):
        return self.coef * np.sum(np.asarray(x) ** 2, axis=-1)

    def g(self, x):
        return np.exp(self.log_g(x))

    def __call__(self, x):
        return np.exp(np.minimum(self.log_g(x), self.log_cap))


def lipschitz_budget(schedule: AnnealSchedule, i: int) -> float:
    """Budgeted Lipschitz constant of h_i relative to R_i."""
    if i == schedule.M:
        return 2 * math.e**2 * math.sqrt(schedule.mu)
    return 112 * math.e / math.sqrt(schedule.sigma_sq(i))


def make_truncated_ratio(schedule: AnnealSchedule, i: int, r_plus: float) -> TruncatedRatio:
    if not r_plus >= 0:
        raise ValueError(f"r_plus must be non-negative, got {r_plus}")
    return TruncatedRatio(schedule.sigma_sq(i), schedule.alpha_eff(i), float(r_plus),
                          lipschitz_budget(schedule, i))


def mode_mean_bound(d: int, m: float) -> float:
    """Upper bound on E|x - x*| for an m-strongly log-concave law."""
    return (math.sqrt(d) + 2 * math.sqrt(2 * math.log(2))) / math.sqrt(m)


# ----------------------------------------------------------- sampler families

class UldFamily:
    name = "uld"
    grads_per_step = 1

    def chain(self, stage, n, eta, T, gen):
        return uld_chain(np.zeros(stage.d), stage, eta, T, gen, n=n).x

    def coupled(self, stage, n, eta, T, gen):
        c = uld_coupled_run(np.zeros(stage.d), stage, eta, T, gen, n=n)
        return c.x_fine, c.x_coarse

    def accuracy_params(self, stage, eps, settings):
        return default_uld_params(stage, eps)

    def variance_model(self, stage, L_g, eps_b, settings):
        A = settings.uld_variance_const * stage.d * stage.kappa**2 / stage.mu
        return VarianceModel([(A, 2)])

    def T_of_eps(self, stage):
        d, mu, kappa = stage.d, stage.mu, stage.kappa
        return lambda e: max(0.0, 0.5 * kappa * math.log(48 * (d / mu) / e))


class RmmFamily(UldFamily):
    name = "rmm"
    grads_per_step = 2

    def chain(self, stage, n, eta, T, gen):
        return rmm_chain(np.zeros(stage.d), stage, eta, T, gen, n=n).x

    def coupled(self, stage, n, eta, T, gen):
        c = rmm_coupled_run(np.zeros(stage.d), stage, eta, T, gen, n=n)
        return c.x_fine, c.x_coarse

    def accuracy_params(self, stage, eps, settings):
        return default_rmm_params(stage, eps, settings.rmm_step_c)

    def variance_model(self, stage, L_g, eps_b, settings):
        d, mu, kappa = stage.d, stage.mu, stage.kappa
        lg = max(1.0, math.log(L_g**2 * d / (eps_b**2 * mu)))
        C = settings.rmm_variance_const * lg
        return VarianceModel([(C * d * kappa / mu, 6), (C * d / mu, 3)])

    def T_of_eps(self, stage):
        d, mu, kappa = stage.d, stage.mu, stage.kappa
        return lambda e: max(0.0, 2 * kappa * math.log(20 * (d / mu) / e**2))


FAMILIES = {"uld": UldFamily(), "rmm": RmmFamily()}


def get_family(name):
    if not isinstance(name, str):
        return name
    key = name.lower().replace("mlmc-", "")
    if key not in FAMILIES:
        raise ValueError(f"unknown sampler family {name!r}")
    return FAMILIES[key]


def _eta_max(stage, settings):
    return settings.eta_max_factor / stage.kappa


def _horizon_cap(stage, settings):
    if settings.max_horizon_kappa is None:
        return math.inf
    return settings.max_horizon_kappa * stage.kappa


def _radius_params(stage, eps_acc, family, settings):
    eta, T = family.accuracy_params(stage, eps_acc, settings)
    floored = settings.eta_floor is not None and eta < settings.eta_floor
    if floored:
        eta = min(settings.eta_floor, _eta_max(stage, settings))
    T_cap = _horizon_cap(stage, settings)
    if T > T_cap:
        T, floored = T_cap, True
    T = max(1, math.ceil(T / eta - 1e-9)) * eta
    return eta, T, floored


def _blocked(n, block_size, rng, work, threads):
    from .mlmc import _blocks, _run_blocks
    items = _blocks(n, block_size)
    return np.concatenate(_run_blocks(lambda it: work(it[1], rng.child(it[0]).generator()),
                                      items, threads))


@dataclass
class RadiusEstimate:
    r_hat: float
    r_plus: float
    samples: int
    eta: float
    T: float
    predicted_queries: int
    capped: bool = False


def _radius_accuracy(schedule: AnnealSchedule, i: int) -> float:
    if i < schedule.M:
        return math.sqrt(schedule.sigma_sq(i)) / 8
    return 1 / (8 * math.sqrt(schedule.mu))


def _radius_plus(schedule: AnnealSchedule, i: int, r_hat: float) -> float:
    lg = math.log(8 / schedule.eps)
    if i < schedule.M:
        return r_hat + math.sqrt(schedule.sigma_sq(i)) * math.sqrt(2 * (1 + schedule.alpha) * lg) + 0.25
    return r_hat + math.sqrt(2 * lg) / math.sqrt(schedule.mu) + 0.25


def _radius_batch(base, schedule: AnnealSchedule, idx, family, rng: RngStream,
                  settings: PipelineSettings) -> list:
    """Radius estimates for stages ``idx`` drawn in one stacked batch.

    Stage i samples from rho_{i+1}; all stages share the smallest step and
    the longest horizon any of them needs.
    """
    nexts = [make_annealed_stage(base, schedule.sigma_sq(i + 1)) if i < schedule.M else base
             for i in idx]
    params = [_radius_params(nx, _radius_accuracy(schedule, i), family, settings)
              for nx, i in zip(nexts, idx)]
    eta = min(p[0] for p in params)
    T = max(1, math.ceil(max(p[1] for p in params) / eta - 1e-9)) * eta
    capped = any(p[2] for p in params)
    S = 2**10 * schedule.M
    if settings.max_radius_samples is not None and S > settings.max_radius_samples:
        S = settings.max_radius_samples
        capped = True
    precs = [getattr(nx, "prec", 0.0) for nx in nexts]
    B = len(idx)

    def work(n, gen):
        stacked = StackedStagePotential(base, precs, n)
        return family.chain(stacked, n * B, eta, T, gen).reshape(n, B, -1)

    xs = _blocked(S, settings.block_size, rng, work, settings.threads)
    norms = np.linalg.norm(xs, axis=-1)
    if not np.all(np.isfinite(norms)):
        raise EstimationError(f"non-finite sample norm in radius estimate for stage {idx[0]}",
                              stage=idx[0])
    pq = S * n_steps(T, eta) * family.grads_per_step
    out = []
    for b, i in enumerate(idx):
        r_hat = float(np.mean(norms[:, b]))
        out.append(RadiusEstimate(r_hat, _radius_plus(schedule, i, r_hat), S, eta, T, pq, capped))
    return out


def estimate_radius(stage_next, schedule: AnnealSchedule, i: int, sampler, rng: RngStream,
                    settings: PipelineSettings | None = None) -> RadiusEstimate:
    """Mean norm of samples from rho_{i+1} and the truncation radius r_i^+."""
    settings = settings or PipelineSettings()
    family = get_family(sampler)
    eta, T, capped = _radius_params(stage_next, _radius_accuracy(schedule, i), family, settings)
    S = 2**10 * schedule.M
    if settings.max_radius_samples is not None and S > settings.max_radius_samples:
        S = settings.max_radius_samples
        capped = True
    xs = _blocked(S, settings.block_size, rng,
                  lambda n, gen: family.chain(stage_next, n, eta, T, gen), settings.threads)
    norms = np.linalg.norm(xs, axis=-1)
    if not np.all(np.isfinite(norms)):
        raise EstimationError(f"non-finite sample norm in radius estimate for stage {i}", stage=i)
    r_hat = float(np.mean(norms))
    pq = S * n_steps(T, eta) * family.grads_per_step
    return RadiusEstimate(r_hat, _radius_plus(schedule, i, r_hat), S, eta, T, pq, capped)


def _plan_spec(stage, ratio: TruncatedRatio, budget: ErrorBudget, family, settings):
    """(PlanSpec, horizon_capped) for one stage."""
    model = family.variance_model(stage, ratio.L_h, budget.eps_b, settings)
    T_of = family.T_of_eps(stage)
    cap = _horizon_cap(stage, settings)
    hit = T_of(budget.eps_b / ratio.L_h) > cap
    spec = PlanSpec(model, ratio.L_h, 1 / stage.mu, _eta_max(stage, settings),
                    lambda e: min(T_of(e), cap))
    return spec, hit


def _shared_plan(specs, budget, settings):
    plan = plan_levels_shared([s for s, _ in specs], budget.eps_b, budget.eps_sigma, settings.C_F)
    plan = apply_caps(plan, settings.max_levels, settings.max_level0_samples)
    if any(h for _, h in specs) and not plan.capped:
        plan = replace(plan, capped=True, planned_k=plan.k, planned_Ns=plan.Ns)
    return plan


def plan_stage(stage, ratio: TruncatedRatio, budget: ErrorBudget, sampler,
               settings: PipelineSettings | None = None) -> LevelPlan:
    """Level plan for one stage with budgets relative to R_i.

    Dividing h_i by R_i scales the Lipschitz constant and both budgets by the
    same factor, and the plan depends on them only through eps_b / L_g and
    eps_sigma / L_g, so the relative quantities are used directly.
    """
    settings = settings or PipelineSettings()
    family = get_family(sampler)
    return _shared_plan([_plan_spec(stage, ratio, budget, family, settings)], budget, settings)


def estimate_stage_ratio(stage, ratio: TruncatedRatio, budget: ErrorBudget, sampler, rng: RngStream,
                         settings: PipelineSettings | None = None, counter=None):
    """Multilevel estimate of E_{rho_i} h_i; returns (R_hat, MlmcEstimate, plan)."""
    settings = settings or PipelineSettings()
    family = get_family(sampler)
    plan = plan_stage(stage, ratio, budget, family, settings)
    est = mlmc_estimate(lambda n, eta, T, gen: family.coupled(stage, n, eta, T, gen),
                        lambda n, eta, T, gen: family.chain(stage, n, eta, T, gen),
                        ratio, plan, rng, counter=counter, threads=settings.threads,
                        block_size=settings.block_size)
    return est.r_hat, est, plan


class StackedRatio:
    """Truncated ratios of B stages applied to an (n * B, d) stacked batch."""

    def __init__(self, ratios):
        self.ratios = list(ratios)
        self.coef = np.array([r.coef for r in self.ratios])
        self.log_cap = np.array([r.log_cap for r in self.ratios])

    def __call__(self, x):
        B = len(self.ratios)
        x = np.asarray(x).reshape(-1, B, x.shape[-1])
        return np.exp(np.minimum(self.coef * np.sum(x * x, axis=-1), self.log_cap))


def _ratio_batch(base, schedule, idx, ratios, budget, family, rng, settings):
    """Multilevel estimates for stages ``idx`` sharing one plan and one batch."""
    stages = [make_annealed_stage(base, schedule.sigma_sq(i)) for i in idx]
    plan = _shared_plan([_plan_spec(st, r, budget, family, settings)
                         for st, r in zip(stages, ratios)], budget, settings)
    precs = [st.prec for st in stages]
    B = len(idx)
    est = mlmc_estimate(
        lambda n, eta, T, gen: family.coupled(StackedStagePotential(base, precs, n), n * B, eta, T, gen),
        lambda n, eta, T, gen: family.chain(StackedStagePotential(base, precs, n), n * B, eta, T, gen),
        StackedRatio(ratios), plan, rng, threads=settings.threads, block_size=settings.block_size)
    return est, plan


# -------------------------------------------------------------------- report

@dataclass
class RunReport:
    method: str
    eps: float
    seed: int
    d: int
    log_z1_hat: float
    log_r_hats: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    schedule: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)
    grad_queries: int = 0
    value_queries: int = 0
    predicted_grad_queries: int = 0
    budget_capped: bool = False
    status: str = "ok"
    failed_stage: int | None = None
    message: str | None = None
    wall_time: float | None = None
    config: dict | None = None

    @property
    def log_z_hat(self) -> float:
        return assemble_log_z(self.log_z1_hat, self.log_r_hats)

    @property
    def z_hat(self) -> float:
        return _safe_exp(self.log_z_hat)

    @property
    def z1_hat(self) -> float:
        return _safe_exp(self.log_z1_hat)

    def to_dict(self) -> dict:
        out = {
            "method": self.method, "eps": self.eps, "seed": self.seed, "d": self.d,
            "status": self.status, "failed_stage": self.failed_stage, "message": self.message,
            "log_z_hat": self.log_z_hat, "z_hat": self.z_hat,
            "log_z1_hat": self.log_z1_hat, "z1_hat": self.z1_hat,
            "log_r_hats": list(self.log_r_hats),
            "queries": {"grad": self.grad_queries, "value": self.value_queries,
                        "predicted_grad": self.predicted_grad_queries},
            "budget_capped": self.budget_capped,
            "schedule": self.schedule, "settings": self.settings, "target": self.target,
            "stages": self.stages, "wall_time": self.wall_time,
        }
        if self.config is not None:
            out["config"] = self.config
        return out


def _safe_exp(v):
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def assemble_log_z(log_z1: float, log_r_hats) -> float:
    """log Z1 + sum_i log R_i, summed left to right."""
    total = float(log_z1)
    for lr in log_r_hats:
        total += float(lr)
    return total


def recompute_log_z(report: dict) -> float:
    return assemble_log_z(report["log_z1_hat"], report["log_r_hats"])


# ------------------------------------------------------------------ pipelines

def _new_report(method, base, eps, seed, settings):
    return RunReport(method=method, eps=eps, seed=seed, d=base.d, log_z1_hat=math.nan,
                     settings=settings.to_dict(), target=base.describe())


def run_pipeline(base: TargetPotential, eps: float, sampler_family, seed: int,
                 settings: PipelineSettings | None = None) -> RunReport:
    """Multilevel annealing estimate of Z for ``base``.

    Stages are processed in batches of ``settings.stage_batch`` consecutive
    stages that share a level plan and run as one stacked chain population;
    the batches' random streams are keyed by their first stage. Raises
    EstimationError with the partial report if a stage fails.
    """
    settings = settings or PipelineSettings()
    family = get_family(sampler_family)
    _check_eps(eps)
    t0 = time.perf_counter()
    counted = base if isinstance(base, CountingPotential) else wrap_counting(base)
    counter = counted.counter
    rng = RngStream(int(seed))
    schedule = build_schedule(base.d, base.mu, base.L, eps, settings.max_stages)
    budget = ErrorBudget(eps, schedule.M)
    report = _new_report("mlmc-" + family.name, base, eps, seed, settings)
    report.schedule = schedule.to_dict()
    report.log_z1_hat = log_estimate_z1(schedule)
    capped = schedule.capped
    M = schedule.M
    v0, g0 = counter.snapshot()
    stage_i = None
    try:
        for start in range(1, M + 1, settings.stage_batch):
            idx = list(range(start, min(start + settings.stage_batch, M + 1)))
            B = len(idx)
            stage_i = start
            ts = time.perf_counter()
            vb, gb = counter.snapshot()
            rads = _radius_batch(counted, schedule, idx, family, rng.child(start, rngmod.RADIUS),
                                 settings)
            ratios = [make_truncated_ratio(schedule, i, r.r_plus) for i, r in zip(idx, rads)]
            est, plan = _ratio_batch(counted, schedule, idx, ratios, budget, family,
                                     rng.child(start, rngmod.MLMC), settings)
            capped |= plan.capped or any(r.capped for r in rads)
            va, ga = counter.snapshot()
            r_hats = est.r_hat
            secs = (time.perf_counter() - ts) / B
            pq = rads[0].predicted_queries + predicted_queries(plan, family.grads_per_step)
            for b, (i, rad) in enumerate(zip(idx, rads)):
                stage_i = i
                r_hat = float(r_hats[b])
                if not (r_hat > 0 and math.isfinite(r_hat)):
                    raise EstimationError(f"stage {i} ratio estimate {r_hat} is not positive", stage=i)
                nxt_mu = base.mu + (1 / schedule.sigma_sq(i + 1) if i < M else 0.0)
                report.log_r_hats.append(math.log(r_hat))
                report.predicted_grad_queries += pq
                report.stages.append({
                    "stage": i, "batch": start, "sigma_sq": schedule.sigma_sq(i),
                    "r_hat": rad.r_hat, "r_plus": rad.r_plus, "R_hat": r_hat,
                    "log_R_hat": math.log(r_hat),
                    "radius": {"samples": rad.samples, "eta": rad.eta, "T": rad.T},
                    "mode_mean_ok": rad.r_hat <= mode_mean_bound(base.d, nxt_mu) + 0.25,
                    "plan": plan.to_dict(),
                    "level_means": [m[b] for m in est.level_means],
                    "level_variances": [v[b] for v in est.level_variances],
                    "queries": (ga - gb) // B, "value_queries": (va - vb) // B,
                    "predicted_queries": pq, "seconds": secs,
                })
    except Exception as exc:  # noqa: BLE001 - reported with the partial record
        report.status = "failed"
        report.failed_stage = stage_i
        report.message = f"{type(exc).__name__}: {exc}"
        _finish(report, counter, v0, g0, capped, t0)
        raise EstimationError(report.message, stage=stage_i, report=report) from exc
    _finish(report, counter, v0, g0, capped, t0)
    return report


def _finish(report, counter, v0, g0, capped, t0):
    v, g = counter.snapshot()
    report.value_queries = v - v0
    report.grad_queries = g - g0
    report.budget_capped = bool(capped)
    report.wall_time = time.perf_counter() - t0


@dataclass(frozen=True)
class MalaSchedule:
    sigma1_sq: float
    ratio: float
    M: int
    K: int
    delta: float
    capped: bool

    def sigma_sq(self, i):
        return math.inf if i == self.M + 1 else self.sigma1_sq * self.ratio ** (i - 1)

    def to_dict(self):
        return {"sigma1_sq": self.sigma1_sq, "ratio": self.ratio, "M": self.M,
                "K": self.K, "delta": self.delta, "capped": self.capped}


def build_mala_schedule(d, mu, L, eps, max_stages=None, max_samples=None) -> MalaSchedule:
    """Ladder with sigma_{i+1}^2 = sigma_i^2 (1 + 1/sqrt(d)) and K draws per stage."""
    _check_eps(eps)
    kappa = L / mu
    sigma1_sq = eps / (2 * d * L)
    ratio = 1 + 1 / math.sqrt(d)
    M = max(1, math.ceil(math.log(2 * d**1.5 * kappa / eps) / math.log(ratio)))
    capped = False
    if max_stages is not None and M > max_stages:
        # stretch the ratio so the same top temperature is reached
        top = sigma1_sq * ratio ** (M - 1)
        M = int(max_stages)
        if M >= 2:
            ratio = (top / sigma1_sq) ** (1 / (M - 1))
        capped = True
    K = math.ceil(1200 * M / eps**2)
    if max_samples is not None and K > max_samples:
        K = int(max_samples)
        capped = True
    return MalaSchedule(sigma1_sq, ratio, M, K, 1 / (4 * M * K), capped)


def mala_stage_params(stage, delta, settings) -> tuple[float, int]:
    """(h, n) for one stage: h = c/(L d max(1, sqrt(kappa/d))), n per the mixing bound."""
    d, kappa = stage.d, stage.kappa
    spread = max(1.0, math.sqrt(kappa / d))
    h = settings.mala_step_c / (stage.L * d * spread)
    n = math.ceil(settings.mala_steps_C * d * kappa * math.log(d / delta) * spread)
    return h, max(1, n)


def _log_mean_exp(a):
    m = np.max(a)
    return float(m + np.log(np.mean(np.exp(a - m))))


def run_mala_pipeline(base: TargetPotential, eps: float, seed: int,
                      settings: PipelineSettings | None = None) -> RunReport:
    """Baseline: K independent MALA draws per stage, plain averages of g_i."""
    settings = settings or PipelineSettings()
    t0 = time.perf_counter()
    counted = base if isinstance(base, CountingPotential) else wrap_counting(base)
    counter = counted.counter
    rng = RngStream(int(seed))
    sch = build_mala_schedule(base.d, base.mu, base.L, eps, settings.max_stages,
                              settings.mala_max_samples)
    report = _new_report("mala", base, eps, seed, settings)
    report.schedule = sch.to_dict()
    report.log_z1_hat = 0.5 * base.d * math.log(2 * math.pi * sch.sigma1_sq)
    v0, g0 = counter.snapshot()
    stage_i = None
    try:
        for i in range(1, sch.M + 1):
            stage_i = i
            ts = time.perf_counter()
            vb, gb = counter.snapshot()
            s2, s2n = sch.sigma_sq(i), sch.sigma_sq(i + 1)
            stage = make_annealed_stage(counted, s2)
            h, n = mala_stage_params(stage, sch.delta, settings)
            b = 1 / s2 - (0.0 if math.isinf(s2n) else 1 / s2n)

            def work(m, gen, stage=stage, h=h, n=n):
                x0 = gen.standard_normal((m, stage.d)) / math.sqrt(stage.L)
                res = mala_chain(x0, stage, h, n, gen)
                return np.concatenate([res.x, np.full((m, 1), res.active)], axis=1)

            from .mlmc import _blocks, _run_blocks
            srng = rng.child(i, rngmod.MALA)
            parts = _run_blocks(lambda it: work(it[1], srng.child(it[0]).generator()),
                                _blocks(sch.K, settings.block_size), settings.threads)
            xs = np.concatenate([p[:, :-1] for p in parts])
            active = int(sum(p[0, -1] for p in parts))
            log_g = 0.5 * b * np.sum(xs**2, axis=-1)
            if not np.all(np.isfinite(log_g)):
                raise EstimationError(f"non-finite sample in stage {i}", stage=i)
            lr = _log_mean_exp(log_g)
            va, ga = counter.snapshot()
            report.log_r_hats.append(lr)
            report.predicted_grad_queries += sch.K + active
            report.stages.append({
                "stage": i, "sigma_sq": s2, "R_hat": math.exp(lr), "log_R_hat": lr,
                "h": h, "steps": n, "samples": sch.K, "active_iterations": active,
                "queries": ga - gb, "value_queries": va - vb, "predicted_queries": sch.K + active,
                "seconds": time.perf_counter() - ts,
            })
    except Exception as exc:  # noqa: BLE001
        report.status = "failed"
        report.failed_stage = stage_i
        report.message = f"{type(exc).__name__}: {exc}"
        _finish(report, counter, v0, g0, sch.capped, t0)
        raise EstimationError(report.message, stage=stage_i, report=report) from exc
    _finish(report, counter, v0, g0, sch.capped, t0)
    return report


def run_method(base, eps, method, seed, settings=None) -> RunReport:
    if method == "mala":
        return run_mala_pipeline(base, eps, seed, settings)
    return run_pipeline(base, eps, method, seed, settings)


# ---------------------------------------------------------- error predicates

def combine_thresholds(M: int, eps2: float, eps3: float) -> tuple[float, float]:
    """(relative bias bound, relative variance bound) required of every stage."""
    return eps2 / (2 * M), eps3**2 / (40 * M)


@dataclass(frozen=True)
class Certificate:
    certified: bool
    reasons: tuple = ()

    def __bool__(self):
        return self.certified


def combine_error_check(z1_ratio_bounds, stage_biases, stage_variances, eps_parts) -> Certificate:
    """Check the hypotheses under which Z_hat / Z lies in exp(+-(eps1+eps2+eps3)).

    z1_ratio_bounds: (lo, hi) enclosing Z1_hat / Z1.
    stage_biases:    |R_tilde_i - R_i| / R_i per stage.
    stage_variances: Var(R_hat_i) / R_tilde_i^2 per stage.
    eps_parts:       (eps1, eps2, eps3).
    The conclusion then holds with probability at least 7/8.
    """
    eps1, eps2, eps3 = eps_parts
    biases = list(stage_biases)
    variances = list(stage_variances)
    M = max(len(biases), len(variances), 1)
    bias_tol, var_tol = combine_thresholds(M, eps2, eps3)
    reasons = []
    lo, hi = z1_ratio_bounds
    if lo < math.exp(-eps1) or hi > math.exp(eps1):
        reasons.append("Z1 ratio outside exp(+-eps1)")
    for i, b in enumerate(biases, 1):
        if b > bias_tol:
            reasons.append(f"stage {i} bias {b} > {bias_tol}")
    for i, v in enumerate(variances, 1):
        if v > var_tol:
            reasons.append(f"stage {i} variance {v} > {var_tol}")
    return Certificate(not reasons, tuple(reasons))


def prodvar_bound(eta: float, M: int, eps: float) -> float:
    """P(|prod Y - prod Ybar| >= (eps/2) prod Ybar) <= 5 eta M / eps^2."""
    return 5 * eta * M / eps**2


def prodvar_deviation_frequency(M: int, eta: float, eps: float, trials: int, rng) -> float:
    """Simulated deviation frequency with lognormal factors, E Y = 1, E Y^2 = 1 + eta."""
    gen = rngmod.as_generator(rng)
    s2 = math.log1p(eta)
    z = gen.standard_normal((trials, M))
    logp = np.sum(math.sqrt(s2) * z - 0.5 * s2, axis=1)
    return float(np.mean(np.abs(np.expm1(logp)) >= eps / 2))
