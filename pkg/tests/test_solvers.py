import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advreg.core import AttackNorm, SpdMatrix, spd_from_dense
from advreg.errors import NonPositiveLambda, OrderingViolation, StepsizeViolation, UnsupportedNorm
from advreg.paths import GdPlusConfig, gdplus_point
from advreg.risk import C0, Problem, adversarial_risk, optimal_risk_grid
from advreg.solvers import (
    PdConfig,
    chambolle_pock,
    fit_gdplus_diag_M,
    project_l1_ball,
    project_l2_ball,
    project_linf_ball,
    prox_dual_norm,
    soft_threshold,
    soft_threshold_path,
)

PROX_NORMS = [AttackNorm.linf(), AttackNorm.l2(), AttackNorm.l1()]


def proxy_root(w, w0, sigma, attack, r):
    diff = np.asarray(w) - w0
    return math.sqrt(float(sigma.quad(diff))) + r * float(attack.dual_norm(w))


def random_sigma(rng, d):
    A = rng.standard_normal((d, d))
    return spd_from_dense(A.T @ A / d + 0.1 * np.eye(d))


# -- prox and projections ------------------------------------------------------

@pytest.mark.parametrize("attack", PROX_NORMS)
def test_prox_zero_scale(attack):
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(prox_dual_norm(v, 0.0, attack), v)


def test_prox_examples():
    np.testing.assert_allclose(prox_dual_norm([1.0, -0.3], 0.5, AttackNorm.linf()), [0.5, 0.0])
    np.testing.assert_allclose(prox_dual_norm([3.0, 4.0], 10.0, AttackNorm.l2()), [0.0, 0.0])
    np.testing.assert_allclose(prox_dual_norm([3.0, 4.0], 2.5, AttackNorm.l2()), [1.5, 2.0])
    # dual of l1 is l_inf: the prox clips the largest entries down together
    np.testing.assert_allclose(prox_dual_norm([3.0, 1.0], 1.0, AttackNorm.l1()), [2.0, 1.0])


def test_prox_rejects_other_norms():
    with pytest.raises(UnsupportedNorm):
        prox_dual_norm([1.0, 2.0], 0.5, AttackNorm.lp(3.0))
    with pytest.raises(UnsupportedNorm):
        prox_dual_norm([1.0, 2.0], 0.5, AttackNorm.mahalanobis(SpdMatrix.identity(2)))
    with pytest.raises(ValueError):
        prox_dual_norm([1.0, 2.0], math.inf, AttackNorm.l2())


def test_l1_projection_examples():
    np.testing.assert_array_equal(project_l1_ball([0.2, -0.3], 1.0), [0.2, -0.3])
    np.testing.assert_allclose(project_l1_ball([1.0, 1.0], 1.0), [0.5, 0.5])
    np.testing.assert_allclose(project_l1_ball([3.0, 0.0], 1.0), [1.0, 0.0])
    np.testing.assert_array_equal(project_l1_ball([3.0, 1.0], 0.0), [0.0, 0.0])


def test_l1_projection_is_nearest_point():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = int(rng.integers(1, 8))
        v = 2 * rng.standard_normal(d)
        rad = float(rng.uniform(0.1, 2))
        p = project_l1_ball(v, rad)
        assert np.abs(p).sum() <= rad * (1 + 1e-12)
        # projection onto a convex set: (v - p)^T (x - p) <= 0 for every x in the set
        x = rng.standard_normal((50, d))
        x = x / np.abs(x).sum(axis=1, keepdims=True) * rad * rng.uniform(0, 1, (50, 1))
        assert np.all((x - p) @ (v - p) <= 1e-10)


def test_other_projections():
    np.testing.assert_allclose(project_l2_ball([3.0, 4.0]), [0.6, 0.8])
    np.testing.assert_array_equal(project_l2_ball([0.3, 0.4]), [0.3, 0.4])
    np.testing.assert_array_equal(project_linf_ball([2.0, -0.5, -3.0]), [1.0, -0.5, -1.0])


def test_moreau_identity():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        d = int(rng.integers(1, 20))
        v = 3 * rng.standard_normal(d)
        s = float(rng.uniform(0.01, 3))
        a = prox_dual_norm(v, s, AttackNorm.linf()) + s * project_linf_ball(v / s)
        b = prox_dual_norm(v, s, AttackNorm.l1()) + s * project_l1_ball(v / s, 1.0)
        c = prox_dual_norm(v, s, AttackNorm.l2()) + s * project_l2_ball(v / s)
        assert np.max(np.abs(a - v)) <= 1e-10
        assert np.max(np.abs(b - v)) <= 1e-10
        assert np.max(np.abs(c - v)) <= 1e-10


def test_prox_local_optimality():
    rng = np.random.default_rng(2)
    eps = 1e-6
    for attack in PROX_NORMS:
        for _ in range(1000):
            d = int(rng.integers(1, 6))
            v = 2 * rng.standard_normal(d)
            s = float(rng.uniform(0, 2))
            x = prox_dual_norm(v, s, attack)

            def f(y):
                return 0.5 * float(np.sum((y - v) ** 2)) + s * float(attack.dual_norm(y))

            fx = f(x)
            for j in range(d):
                for sgn in (1.0, -1.0):
                    y = x.copy()
                    y[j] += sgn * eps
                    assert fx <= f(y) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0, 5))
def test_soft_threshold_shrinks(v, level):
    v = np.array(v)
    out = soft_threshold(v, level)
    assert np.all(np.abs(out) <= np.abs(v))
    assert np.all(out * v >= 0)
    np.testing.assert_allclose(np.abs(v) - np.abs(out), np.minimum(np.abs(v), level), atol=1e-12)


# -- Chambolle-Pock ----------------------------------------------------------------

def test_cp_zero_budget_returns_model():
    rng = np.random.default_rng(3)
    sigma = random_sigma(rng, 4)
    w0 = rng.standard_normal(4)
    for attack in PROX_NORMS:
        w, state = chambolle_pock(w0, sigma, attack, 0.0)
        np.testing.assert_allclose(w, w0, atol=1e-4)


def test_cp_large_budget_returns_zero():
    rng = np.random.default_rng(4)
    sigma = random_sigma(rng, 2)
    w0 = rng.standard_normal(2)
    for attack in PROX_NORMS:
        r = 1.5 / C0 * math.sqrt(sigma.quad(w0)) / float(attack.dual_norm(w0))
        w, _ = chambolle_pock(w0, sigma, attack, r)
        assert np.max(np.abs(w)) <= 1e-4
        prob = Problem(w0, sigma, attack, r)
        grid = optimal_risk_grid(prob)
        assert grid.value == pytest.approx(prob.sigma.quad(w0), rel=1e-6)


def test_cp_matches_soft_threshold_on_small_example():
    lam = np.array([1.0, 2.0])
    w0 = np.array([1.0, 0.5])
    w, _ = chambolle_pock(w0, SpdMatrix.diag(lam), AttackNorm.linf(), 0.4)
    best = soft_threshold_path(w0, lam, 0.4).best_value
    pd = proxy_root(w, w0, SpdMatrix.diag(lam), AttackNorm.linf(), 0.4) ** 2
    assert pd == pytest.approx(best, rel=1e-4)


def test_cp_dense_path_agrees_with_diagonal_fast_path():
    lam = np.array([0.5, 1.0, 3.0])
    w0 = np.array([1.0, -0.4, 0.2])
    fast, _ = chambolle_pock(w0, SpdMatrix.diag(lam), AttackNorm.l1(), 0.3, PdConfig(max_iter=3000))
    dense, _ = chambolle_pock(w0, spd_from_dense(np.diag(lam)), AttackNorm.l1(), 0.3, PdConfig(max_iter=3000))
    np.testing.assert_allclose(fast, dense, atol=1e-10)


def test_cp_step_size_violation():
    sigma = SpdMatrix.diag([4.0, 1.0])
    with pytest.raises(StepsizeViolation):
        chambolle_pock([1.0, 1.0], sigma, AttackNorm.l2(), 0.1, PdConfig(eta1=0.5, eta2=0.5))
    with pytest.raises(StepsizeViolation):
        chambolle_pock([1.0, 1.0], sigma, AttackNorm.l2(), 0.1, PdConfig(eta1=-1.0))
    chambolle_pock([1.0, 1.0], sigma, AttackNorm.l2(), 0.1, PdConfig(eta1=0.49, eta2=0.49, max_iter=10))


def test_cp_unsupported_norm():
    with pytest.raises(UnsupportedNorm):
        chambolle_pock([1.0, 1.0], SpdMatrix.identity(2), AttackNorm.lp(1.5), 0.1)


def test_cp_state_invariants():
    rng = np.random.default_rng(5)
    sigma = random_sigma(rng, 6)
    w0 = rng.standard_normal(6)
    w, state = chambolle_pock(w0, sigma, AttackNorm.linf(), 0.2, PdConfig(max_iter=2000))
    assert max(state.dual_norm_history) <= 1 + 1e-12
    assert len(state.objective_history) == state.iter
    assert state.objective_history[-1] == pytest.approx(proxy_root(w, w0, sigma, AttackNorm.linf(), 0.2))
    assert state.w_last is not None


def test_cp_ergodic_consistency():
    rng = np.random.default_rng(6)
    for _ in range(3):
        d = 20
        sigma = random_sigma(rng, d)
        w0 = rng.standard_normal(d)
        attack = PROX_NORMS[int(rng.integers(3))]
        r = float(rng.uniform(0.05, 0.5))
        short, _ = chambolle_pock(w0, sigma, attack, r, PdConfig(max_iter=2000, tol=0))
        long, state = chambolle_pock(w0, sigma, attack, r, PdConfig(max_iter=20_000, tol=0))
        a = proxy_root(short, w0, sigma, attack, r)
        b = proxy_root(long, w0, sigma, attack, r)
        assert abs(a - b) <= 1e-3 * b
        h = np.array(state.objective_history)
        smooth = np.convolve(h, np.ones(50) / 50, mode="valid")
        assert np.all(np.diff(smooth) <= 1e-12 * smooth[0])


def test_cp_cross_solver_agreement():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = int(rng.integers(2, 51))
        lam = rng.exponential(1.0, d) + 0.05
        w0 = rng.standard_normal(d)
        r = float(rng.uniform(0.01, 0.5))
        best = soft_threshold_path(w0, lam, r).best_value
        w, _ = chambolle_pock(w0, SpdMatrix.diag(lam), AttackNorm.linf(), r)
        pd = proxy_root(w, w0, SpdMatrix.diag(lam), AttackNorm.linf(), r) ** 2
        assert abs(pd - best) <= 1e-4 * best


def test_cp_shrinkage_ordering():
    rng = np.random.default_rng(8)
    for attack in PROX_NORMS:
        for _ in range(10):
            d = int(rng.integers(2, 10))
            lam = rng.exponential(1.0, d) + 0.1
            w0 = rng.standard_normal(d)
            w, _ = chambolle_pock(w0, SpdMatrix.diag(lam), attack, float(rng.uniform(0.01, 1)))
            assert np.all(np.abs(w) <= np.abs(w0) + 1e-6)
            assert np.all(w * w0 >= -1e-10)


def test_cp_mahalanobis_matches_grid():
    rng = np.random.default_rng(9)
    for _ in range(5):
        sigma = random_sigma(rng, 2)
        att = AttackNorm.mahalanobis(random_sigma(rng, 2))
        w0 = rng.standard_normal(2)
        r = float(rng.uniform(0.1, 1))
        w, _ = chambolle_pock(w0, sigma, att, r)
        prob = Problem(w0, sigma, att, r)
        grid = optimal_risk_grid(prob, objective="proxy").value
        assert adversarial_risk(w, prob).proxy == pytest.approx(grid, rel=1e-4)


def test_cp_trace(tmp_path):
    path = tmp_path / "trace.csv"
    _, state = chambolle_pock([1.0, -0.5], SpdMatrix.diag([1.0, 2.0]), AttackNorm.linf(), 0.3,
                              PdConfig(max_iter=100, trace_path=str(path)))
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "objective", "dual_feasibility"]
    assert len(rows) == state.iter + 1
    assert float(rows[-1][1]) == state.objective_history[-1]


# -- soft-threshold path --------------------------------------------------------------

def test_st_path_point_examples():
    lam = np.array([1.0, 1.0])
    w0 = np.array([1.0, 0.5])
    np.testing.assert_allclose(soft_threshold(w0, 1.0 * 0.6 / lam), [0.4, 0.0])
    path = soft_threshold_path(w0, lam, 1.0)
    assert path.grid[0] == 0.0 and path.values[0] == pytest.approx((0 + 1.5) ** 2)


def test_st_path_zero_coordinate_stays_zero():
    w0 = np.array([1.0, 0.0, -2.0])
    path = soft_threshold_path(w0, np.ones(3), 0.3)
    assert path.best_w[1] == 0.0


def test_st_path_properties():
    rng = np.random.default_rng(10)
    w0 = rng.standard_normal(6)
    lam = rng.exponential(1.0, 6) + 0.1
    path = soft_threshold_path(w0, lam, 0.4)
    assert path.c == pytest.approx(float(np.max(np.abs(w0) * lam)))
    assert path.t_max <= path.c / 0.4 * (1 + 1e-15)
    assert path.grid.size == 200
    assert np.all(np.abs(path.best_w) <= np.abs(w0)) and np.all(path.best_w * w0 >= 0)
    assert path.best_value <= path.values.min() * (1 + 1e-15)


def test_st_path_rejects_bad_input():
    with pytest.raises(NonPositiveLambda):
        soft_threshold_path([1.0, 2.0], [1.0, 0.0], 0.3)
    with pytest.raises(ValueError):
        soft_threshold_path([1.0, 2.0], [1.0, 1.0], 0.3, grid_size=50)


def test_st_path_beats_random_points():
    rng = np.random.default_rng(11)
    for _ in range(5):
        d = int(rng.integers(2, 8))
        w0 = rng.standard_normal(d)
        lam = rng.exponential(1.0, d) + 0.1
        r = float(rng.uniform(0.05, 1))
        best = soft_threshold_path(w0, lam, r).best_value
        W = 2 * rng.standard_normal((1000, d))
        vals = (np.sqrt(((W - w0) ** 2 * lam).sum(axis=1)) + r * np.abs(W).sum(axis=1)) ** 2
        assert best <= vals.min() * (1 + 1e-12)


# -- diagonal GD+ transform -------------------------------------------------------------

def test_fit_m_half_shrinkage():
    w0 = np.array([1.0, -2.0, 0.5])
    M = fit_gdplus_diag_M(w0, w0 / 2, SpdMatrix.identity(3))
    np.testing.assert_allclose(M, math.sqrt(math.log(2)) * np.eye(3), rtol=1e-14)


def test_fit_m_clamps():
    w0 = np.array([1.0, -2.0])
    S = SpdMatrix.identity(2)
    np.testing.assert_allclose(np.diag(fit_gdplus_diag_M(w0, w0, S)) ** 2, [1e6, 1e6])
    np.testing.assert_allclose(np.diag(fit_gdplus_diag_M(w0, np.zeros(2), S)) ** 2, [1e-6, 1e-6])


def test_fit_m_reproduces_target():
    rng = np.random.default_rng(12)
    lam = rng.exponential(1.0, 5) + 0.1
    w0 = rng.standard_normal(5)
    target = w0 * rng.uniform(0.05, 0.95, 5)
    sigma = SpdMatrix.diag(lam)
    M = fit_gdplus_diag_M(w0, target, sigma, t=2.0)
    prob = Problem(w0, sigma, AttackNorm.linf(), 0.1)
    np.testing.assert_allclose(gdplus_point(prob, GdPlusConfig(M), 2.0), target, rtol=1e-9)


def test_fit_m_ordering_violation():
    S = SpdMatrix.identity(2)
    with pytest.raises(OrderingViolation):
        fit_gdplus_diag_M([1.0, 1.0], [1.5, 0.5], S)
    with pytest.raises(OrderingViolation):
        fit_gdplus_diag_M([1.0, 1.0], [-0.5, 0.5], S)
