import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from logz.hardness import generate
from logz.potentials import (AnnealStagePotential, QueryCounter, StackedStagePotential,
                             make_annealed_stage, make_diag_quadratic, make_gaussian, wrap_counting)


def sandwich_violations(p, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    R = 10 / math.sqrt(p.mu)
    x = rng.uniform(-1, 1, (n, p.d))
    y = rng.uniform(-1, 1, (n, p.d))
    x *= R * rng.random((n, 1)) / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
    y *= R * rng.random((n, 1)) / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-300)
    gap = p.value(y) - p.value(x) - np.sum(p.grad(x) * (y - x), axis=1)
    sq = np.sum((x - y) ** 2, axis=1)
    slack = 1e-8 * (1 + np.abs(gap))
    return int(np.sum(gap < 0.5 * p.mu * sq - slack) + np.sum(gap > 0.5 * p.L * sq + slack))


def test_gaussian_examples():
    g = make_gaussian(2, 1.0)
    assert math.isclose(math.exp(g.log_z()), 2 * math.pi, rel_tol=1e-14)
    assert make_gaussian(1, 1.0).grad(np.array([3.0]))[0] == 3.0
    g5 = make_gaussian(5, 0.25)
    assert g5.mu == g5.L == 4.0 and g5.kappa == 1.0


@pytest.mark.parametrize("d,s2", [(0, 1.0), (2, 0.0), (2, -1.0)])
def test_gaussian_rejects(d, s2):
    with pytest.raises(ValueError):
        make_gaussian(d, s2)


def test_diag_quadratic_examples():
    q = make_diag_quadratic([1, 4])
    assert q.kappa == 4
    # sqrt(2 pi) * sqrt(2 pi / 4) = pi
    assert math.isclose(math.exp(q.log_z()), math.pi, rel_tol=1e-14)
    assert math.isclose(math.exp(make_diag_quadratic([1, 2]).log_z()), math.pi * math.sqrt(2),
                        rel_tol=1e-14)
    assert math.isclose(math.exp(make_diag_quadratic([1]).log_z()), 2.506628274631, rel_tol=1e-12)
    q3 = make_diag_quadratic([2, 2, 2])
    assert q3.mu == q3.L == 2
    with pytest.raises(ValueError):
        make_diag_quadratic([])


def test_minimizer_is_origin():
    for p in (make_gaussian(3, 2.0), make_diag_quadratic([1, 3, 9])):
        assert p.value(np.zeros(p.d)) == 0
        assert np.linalg.norm(p.grad(np.zeros(p.d))) == 0


def test_shape_checks():
    g = make_gaussian(2)
    with pytest.raises(ValueError):
        g.grad(np.zeros(3))
    with pytest.raises(ValueError):
        g.value(np.zeros((2, 2, 2)))


def test_stage_examples():
    st_ = make_annealed_stage(make_gaussian(2, 1.0), 1.0)
    assert st_.stage_mu == st_.stage_L == 2
    inf_stage = make_annealed_stage(make_gaussian(2, 1.0), math.inf)
    x = np.array([[0.3, -1.2]])
    assert np.array_equal(inf_stage.grad(x), make_gaussian(2, 1.0).grad(x))
    hard = generate(1, 4, types=[2, 1, 2, 1])
    s = make_annealed_stage(hard, 0.01)
    assert math.isclose(s.kappa, 101.5 / 100.5, rel_tol=1e-14)
    assert s.kappa <= hard.kappa


@given(sigma2=st.floats(1e-3, 1e3), lam=st.lists(st.floats(0.1, 10), min_size=1, max_size=4))
def test_stage_condition_number_not_larger(sigma2, lam):
    base = make_diag_quadratic(lam)
    assert make_annealed_stage(base, sigma2).kappa <= base.kappa * (1 + 1e-12)


def test_stage_value_and_grad_formulas(rng):
    base = make_diag_quadratic([1, 2, 5])
    s = make_annealed_stage(base, 0.7)
    x = rng.normal(size=(50, 3))
    assert np.allclose(s.value(x), np.sum(x * x, 1) / 1.4 + base.value(x), rtol=1e-14)
    assert np.allclose(s.grad(x), x / 0.7 + base.grad(x), rtol=1e-14)


def test_stage_grad_matches_finite_differences(rng):
    base = generate(2, 4, types=[2, 2, 1, 2])
    s = make_annealed_stage(base, 0.5)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1.2, 1.2, size=2)
        step = 1e-5 * (1 + np.linalg.norm(x))
        fd = np.array([(s.value(x + step * e) - s.value(x - step * e)) / (2 * step) for e in np.eye(2)])
        g = s.grad(x)
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12))
    assert worst < 1e-5


@pytest.mark.parametrize("make", [lambda: make_gaussian(3, 0.5),
                                  lambda: make_diag_quadratic([0.5, 2, 7]),
                                  lambda: make_annealed_stage(make_diag_quadratic([1, 3]), 0.2),
                                  lambda: generate(2, 9, types=[2, 1, 2, 2, 2, 1, 1, 2, 2]),
                                  lambda: generate(1, 4, types=[2, 2, 2, 2], mode="equalized")])
def test_convexity_sandwich(make):
    assert sandwich_violations(make()) == 0


def test_counting_examples():
    c = wrap_counting(make_gaussian(2))
    assert c.counter.snapshot() == (0, 0)
    for _ in range(3):
        c.grad(np.zeros(2))
    assert c.counter.snapshot() == (0, 3)
    c.grad(np.zeros((5, 2)))
    assert c.counter.grad_queries == 8


def test_counting_concurrent():
    c = wrap_counting(make_gaussian(2))
    jobs = [("v", 1), ("v", 1), ("g", 2), ("g", 3)]

    def work(kind, n):
        for _ in range(n):
            (c.value if kind == "v" else c.grad)(np.ones(2))

    threads = [threading.Thread(target=work, args=j) for j in jobs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert c.counter.snapshot() == (2, 5)


def test_counter_many_threads():
    q = QueryCounter()
    threads = [threading.Thread(target=lambda: [q.add(grad=1) for _ in range(1000)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert q.snapshot() == (0, 8000)


def test_stacked_stage_matches_individual_stages(rng):
    base = make_diag_quadratic([1, 3])
    precs = [2.0, 0.5, 0.0]
    stacked = StackedStagePotential(base, precs, 4)
    x = rng.normal(size=(12, 2))
    for r in range(12):
        p = precs[r % 3]
        ref = AnnealStagePotential(base, 1 / p if p else math.inf)
        assert np.allclose(stacked.grad(x)[r], ref.grad(x[r]), rtol=1e-15)
        assert stacked.row_L[r, 0] == ref.L
    with pytest.raises(ValueError):
        stacked.grad(x[:5])
