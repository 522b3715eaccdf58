import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from logz.mlmc import (LevelPlan, MlmcError, VarianceModel, apply_caps, calibrate_variance_model,
                       mlmc_estimate, plan_levels, predicted_queries)
from logz.potentials import make_gaussian, wrap_counting
from logz.rng import RngStream
from logz.samplers import n_steps, rmm_chain, rmm_coupled_run, uld_chain, uld_coupled_run


def uld_runners(stage):
    single = lambda n, eta, T, gen: uld_chain(np.zeros(stage.d), stage, eta, T, gen, n=n).x
    def coupled(n, eta, T, gen):
        c = uld_coupled_run(np.zeros(stage.d), stage, eta, T, gen, n=n)
        return c.x_fine, c.x_coarse
    return coupled, single


def test_variance_model_validation():
    m = VarianceModel([(2, 2), (1, 3)])
    assert m(0.0) == 0 and math.isclose(m(0.5), 2 * 0.25 + 0.125)
    for bad in ([], [(-1, 2)], [(1, 1)], [(math.inf, 2)]):
        with pytest.raises(ValueError):
            VarianceModel(bad)


@given(a=st.floats(0, 1e3), b=st.floats(1.01, 6), e1=st.floats(1e-6, 1), e2=st.floats(1e-6, 1))
def test_variance_model_monotone(a, b, e1, e2):
    m = VarianceModel([(a, b)])
    lo, hi = sorted((e1, e2))
    assert m(lo) <= m(hi)


def test_plan_example():
    p = plan_levels(VarianceModel([(1, 2)]), 1, 1, 0.1, 0.1, 10, lambda e: 1.0)
    assert math.isclose(p.eta0, 0.5, rel_tol=1e-8)
    assert p.k == 4 and math.isclose(p.etas[-1], 0.03125, rel_tol=1e-8)
    assert p.Ns[0] == 400


def test_plan_bias_met_at_coarsest_level():
    F = VarianceModel([(1, 2)])
    eta0 = plan_levels(F, 1, 1, 0.1, 0.1, 10, lambda e: 1.0).eta0
    p = plan_levels(F, 1, 1, 2 * math.sqrt(F(eta0)), 0.1, 10, lambda e: 1.0)
    assert p.k == 0


def test_plan_uld_constant():
    p = plan_levels(VarianceModel([(2662.4 * 4, 2)]), 1, 1, 0.1, 0.1, 10, lambda e: 1.0)
    assert math.isclose(p.eta0, math.sqrt(0.25 / 10649.6), rel_tol=1e-8)
    assert math.isclose(p.eta0, 4.845e-3, rel_tol=1e-3)


def test_plan_invariants():
    F = VarianceModel([(3, 2), (0.5, 3)])
    p = plan_levels(F, 2.0, 0.5, 0.01, 0.02, 0.2, lambda e: 7.3)
    assert F(p.eta0) <= 0.5 / 4 * (1 + 1e-9) and p.eta0 <= 0.2
    assert F(p.etas[-1]) <= 0.01**2 / (4 * 4.0)
    assert p.T >= 7.3 and n_steps(p.T, p.eta0) * p.eta0 == pytest.approx(p.T)
    for j, e in enumerate(p.etas):
        assert n_steps(p.T, e) == n_steps(p.T, p.eta0) * 2**j


def test_plan_errors():
    F = VarianceModel([(1, 2)])
    with pytest.raises(ValueError):
        plan_levels(F, 1, 1, 0.0, 0.1, 1, lambda e: 1.0)
    with pytest.raises(ValueError):
        plan_levels(F, 1, 1, 1e-40, 0.1, 1, lambda e: 1.0)


def test_eta_max_binding_is_not_an_error():
    p = plan_levels(VarianceModel([(1e-6, 2)]), 1, 1, 1e-3, 0.1, 0.05, lambda e: 1.0)
    assert p.eta0 == 0.05


@given(eb=st.floats(1e-3, 0.5), es=st.floats(1e-3, 0.5), shrink=st.floats(0.05, 1.0))
def test_monotone_budgets(eb, es, shrink):
    F = VarianceModel([(2, 2)])
    base = plan_levels(F, 1, 1, eb, es, 1, lambda e: 1.0)
    tighter_b = plan_levels(F, 1, 1, eb * shrink, es, 1, lambda e: 1.0)
    assert tighter_b.k >= base.k
    tighter_s = plan_levels(F, 1, 1, eb, es * shrink, 1, lambda e: 1.0)
    assert all(a >= b for a, b in zip(tighter_s.Ns, base.Ns))


def test_apply_caps_keeps_ratios():
    p = plan_levels(VarianceModel([(1, 2)]), 1, 1, 0.01, 0.01, 10, lambda e: 1.0)
    c = apply_caps(p, max_levels=2, max_level0_samples=100)
    assert c.capped and c.k == 2 and c.Ns[0] == 100 and c.planned_Ns == p.Ns
    assert all(n >= 2 for n in c.Ns)
    assert apply_caps(p) is p


def test_predicted_queries_examples():
    p = LevelPlan(0.1, 0, (0.1,), (10,), 1.0, 0.1, 0.1)
    assert predicted_queries(p) == 100
    p = LevelPlan(0.5, 1, (0.5, 0.25), (4, 2), 1.0, 0.1, 0.1)
    assert predicted_queries(p) == 20
    assert predicted_queries(p, grads_per_step=2) == 40


def test_constant_g_telescopes_exactly():
    stage = make_gaussian(2)
    plan = LevelPlan(0.2, 2, (0.2, 0.1, 0.05), (16, 8, 4), 1.0, 0.1, 0.1)
    est = mlmc_estimate(*uld_runners(stage), lambda x: np.full(len(x), 7.3), plan, RngStream(0))
    assert est.r_hat == 7.3
    assert est.level_means[1:] == [0.0, 0.0]


def test_k0_is_plain_monte_carlo():
    stage = make_gaussian(1)
    plan = LevelPlan(0.1, 0, (0.1,), (50,), 1.0, 0.1, 0.1)
    rng = RngStream(4)
    est = mlmc_estimate(*uld_runners(stage), lambda x: x[:, 0], plan, rng)
    xs = uld_chain(np.zeros(1), stage, 0.1, 1.0, rng.child(0, 0).generator(), n=50).x
    assert est.r_hat == float(np.mean(xs[:, 0]))


def test_non_finite_g_reports_level_and_sample():
    stage = make_gaussian(1)
    plan = LevelPlan(0.1, 1, (0.1, 0.05), (4, 6), 0.5, 0.1, 0.1)

    def g(x):
        out = x[:, 0].copy()
        if len(x) == 6:
            out[3] = np.nan
        return out

    with pytest.raises(MlmcError, match="level 1, sample 3"):
        mlmc_estimate(*uld_runners(stage), g, plan, RngStream(0))


def test_threads_and_blocks_do_not_change_result():
    stage = make_gaussian(2)
    plan = LevelPlan(0.2, 1, (0.2, 0.1), (70, 30), 1.0, 0.1, 0.1)
    g = lambda x: x[:, 0] ** 2
    a = mlmc_estimate(*uld_runners(stage), g, plan, RngStream(5), block_size=16, threads=1)
    b = mlmc_estimate(*uld_runners(stage), g, plan, RngStream(5), block_size=16, threads=4)
    assert a.r_hat == b.r_hat and a.level_variances == b.level_variances


def test_query_count_matches_prediction():
    stage = wrap_counting(make_gaussian(2))
    plan = LevelPlan(0.2, 2, (0.2, 0.1, 0.05), (9, 5, 3), 1.4, 0.1, 0.1)
    est = mlmc_estimate(*uld_runners(stage), lambda x: x[:, 0], plan, RngStream(1),
                        counter=stage.counter)
    assert est.queries == predicted_queries(plan) == stage.counter.grad_queries

    s2 = wrap_counting(make_gaussian(2))
    single = lambda n, eta, T, gen: rmm_chain(np.zeros(2), s2, eta, T, gen, n=n).x
    coupled = lambda n, eta, T, gen: (lambda c: (c.x_fine, c.x_coarse))(
        rmm_coupled_run(np.zeros(2), s2, eta, T, gen, n=n))
    est = mlmc_estimate(coupled, single, lambda x: x[:, 0], plan, RngStream(1), counter=s2.counter)
    assert est.queries == predicted_queries(plan, 2)


def _gaussian_plan(eps_b, eps_sigma):
    d, mu, kappa = 2, 1.0, 1.0
    model = VarianceModel([(0.05 * d * kappa**2 / mu, 2)])
    T_of = lambda e: 0.5 * kappa * math.log(48 * (d / mu) / e)
    return plan_levels(model, 1.0, 1 / mu, eps_b, eps_sigma, 0.1 / kappa, T_of)


def test_gaussian_first_coordinate_contract():
    """E x_1 = 0 under N(0, I): |r_hat| <= eps_b + 3 eps_sigma in >= 95 of 100 runs,
    and the summed per-level variance stays within 2 eps_sigma^2 in >= 95 runs."""
    stage = make_gaussian(2)
    plan = _gaussian_plan(0.05, 0.05)
    hits = var_ok = 0
    for seed in range(100):
        est = mlmc_estimate(*uld_runners(stage), lambda x: x[:, 0], plan, RngStream(seed))
        hits += abs(est.r_hat) <= 0.05 + 3 * 0.05
        var_ok += sum(v / n for v, n in zip(est.level_variances, est.Ns)) <= 2 * 0.05**2
    assert hits >= 95 and var_ok >= 95


def test_unbiased_relative_to_finest_level():
    """Mean of r_hat over 10^4 repetitions matches plain MC at the finest step."""
    stage = make_gaussian(1)
    plan = LevelPlan(0.4, 2, (0.4, 0.2, 0.1), (8, 4, 2), 1.2, 0.1, 0.1)
    coupled, single = uld_runners(stage)
    g = lambda x: x[:, 0] ** 2
    reps = 10_000
    # one call with N_j * reps samples has the same mean as averaging reps calls,
    # and block_size = N_j keeps each repetition on its own stream
    r = []
    for j, n in enumerate(plan.Ns):
        vals = []
        for b in range(reps // 250):
            gen = RngStream(11).child(j, b).generator()
            if j == 0:
                vals.append(g(single(n * 250, plan.etas[0], plan.T, gen)))
            else:
                f, c = coupled(n * 250, plan.etas[j - 1], plan.T, gen)
                vals.append(g(f) - g(c))
        vals = np.concatenate(vals).reshape(reps, n)
        r.append(vals.mean(axis=1))
    r_hat = np.sum(r, axis=0)
    ref = g(single(200_000, plan.etas[-1], plan.T, RngStream(12).generator()))
    se = math.sqrt(r_hat.var() / reps + ref.var() / ref.size)
    assert abs(r_hat.mean() - ref.mean()) < 4 * se


def test_calibration_recovers_uld_rate():
    stage = make_gaussian(4)
    coupled, _ = uld_runners(stage)
    A, beta, gaps = calibrate_variance_model(coupled, [0.2, 0.1, 0.05, 0.025], 500, 5.0, RngStream(2))
    assert 1.5 < beta < 2.5 and A > 0 and len(gaps) == 4
    A2, beta2, _ = calibrate_variance_model(coupled, [0.2, 0.1], 200, 2.0, RngStream(2), exponent=2)
    assert beta2 == 2 and A2 > 0
