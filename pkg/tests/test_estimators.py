import math

import numpy as np
import pytest

from advreg.core import AttackNorm, SpdMatrix, spd_from_dense
from advreg.errors import NoOracle, RankDeficient, WrongNorm
from advreg.estimators import (
    Dataset,
    DatasetMeta,
    Stage1Result,
    TwoStageResult,
    calibrate_constant,
    consistency_audit,
    empirical_covariance,
    fit_stage1,
    generate_dataset,
    lasso_cd,
    load_dataset,
    proxy_optimum,
    save_dataset,
    sparse_instance,
    two_stage_fit,
)
from advreg.risk import ALPHA, Problem, adversarial_risk, optimal_risk_grid


def random_sigma(rng, d):
    A = rng.standard_normal((d, d))
    return spd_from_dense(A.T @ A / d + 0.2 * np.eye(d))


# -- data generation ---------------------------------------------------------------

def test_noiseless_responses():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(4)
    data = generate_dataset(w0, random_sigma(rng, 4), 30, 0.0, seed=1)
    np.testing.assert_array_equal(data.y, data.X @ w0)
    assert data.n == 30 and data.dim == 4


def test_dataset_determinism():
    rng = np.random.default_rng(1)
    w0, sigma = rng.standard_normal(3), random_sigma(rng, 3)
    a = generate_dataset(w0, sigma, 100, 0.5, seed=7)
    b = generate_dataset(w0, sigma, 100, 0.5, seed=7)
    c = generate_dataset(w0, sigma, 100, 0.5, seed=8)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.X.tobytes() != c.X.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_large_sample_covariance(seed):
    sigma = SpdMatrix.diag([1.0, 2.0])
    data = generate_dataset([1.0, -1.0], sigma, 100_000, 0.1, seed=seed)
    S = empirical_covariance(data.X)
    assert np.linalg.norm(S.entries - sigma.entries, 2) <= 0.05 * sigma.op_norm


def test_noise_level():
    data = generate_dataset([0.0, 0.0], SpdMatrix.identity(2), 50_000, 0.7, seed=3)
    assert float(np.std(data.y)) == pytest.approx(0.7, rel=0.02)


def test_generate_validation():
    with pytest.raises(ValueError):
        generate_dataset([1.0], SpdMatrix.identity(1), 0)
    with pytest.raises(ValueError):
        generate_dataset([1.0], SpdMatrix.identity(1), 5, -1.0)


def test_sparse_instance():
    w0, sigma = sparse_instance(200, 10, seed=4)
    assert np.count_nonzero(w0) == 10
    assert sigma.is_diagonal and sigma.dim == 200
    assert sigma.quad(w0) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("diag", [True, False])
def test_save_load_roundtrip(tmp_path, diag):
    rng = np.random.default_rng(5)
    sigma = SpdMatrix.diag([1.0, 0.5, 2.0]) if diag else random_sigma(rng, 3)
    data = generate_dataset(rng.standard_normal(3), sigma, 20, 0.3, seed=9)
    path = tmp_path / "data.csv"
    save_dataset(data, path)
    assert path.read_text().splitlines()[0] == "x_1,x_2,x_3,y"
    back = load_dataset(path)
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.meta.true_w0, data.meta.true_w0)
    np.testing.assert_allclose(back.meta.true_sigma.entries, sigma.entries, rtol=1e-15)
    assert back.meta.seed == 9 and back.meta.sigma_eps == 0.3


def test_load_without_sidecar(tmp_path):
    data = Dataset(np.eye(2), np.array([1.0, 2.0]))
    path = tmp_path / "plain.csv"
    save_dataset(data, path)
    back = load_dataset(path)
    assert back.meta is None
    np.testing.assert_array_equal(back.X, np.eye(2))


# -- covariance estimates ---------------------------------------------------------------

def test_covariance_identity_rows():
    X = np.tile(np.eye(3), (4, 1))
    np.testing.assert_allclose(empirical_covariance(X).entries, np.eye(3) / 3)
    np.testing.assert_allclose(empirical_covariance(X, "diagonal").diagonal, np.full(3, 1 / 3))


def test_covariance_rank_deficient():
    X = np.random.default_rng(6).standard_normal((5, 10))
    with pytest.raises(RankDeficient):
        empirical_covariance(X, "raw")
    S = empirical_covariance(X, "ridge")
    assert S.lambda_min > 0
    S = empirical_covariance(X, "ridge", eps=0.5)
    assert S.lambda_min >= 0.5 * (1 - 1e-12)
    with pytest.raises(ValueError):
        empirical_covariance(X, "shrunk")


def test_covariance_diagonal_mode():
    X = np.random.default_rng(7).standard_normal((50, 4))
    S = empirical_covariance(X, "diagonal")
    assert S.is_diagonal
    np.testing.assert_allclose(S.diagonal, np.mean(X * X, axis=0))


def test_covariance_error_decreases_with_n():
    w0, sigma = sparse_instance(200, 10, seed=0)
    for k in range(5):
        errs = []
        for n in (500, 2000):
            X = generate_dataset(w0, sigma, n, 0.5, seed=50 + k).X
            errs.append(np.linalg.norm(empirical_covariance(X).entries - sigma.entries, 2))
        assert errs[1] < errs[0]


# -- Stage 1 --------------------------------------------------------------------------

def test_lasso_zero_penalty_is_least_squares():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((40, 5))
    G, c = A.T @ A / 40, A.T @ rng.standard_normal(40) / 40
    np.testing.assert_allclose(lasso_cd(G, c, 0.0), np.linalg.solve(G, c), atol=1e-8)
    assert np.all(lasso_cd(G, c, 10.0) == 0.0)


def test_lasso_kkt():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((60, 8))
    G, c = A.T @ A / 60, A.T @ rng.standard_normal(60) / 60
    lam = 0.05
    w = lasso_cd(G, c, lam)
    grad = c - G @ w
    on = w != 0
    np.testing.assert_allclose(grad[on], lam * np.sign(w[on]), atol=1e-8)
    assert np.all(np.abs(grad[~on]) <= lam + 1e-8)


def test_ols_noiseless():
    rng = np.random.default_rng(10)
    w0 = rng.standard_normal(6)
    data = generate_dataset(w0, random_sigma(rng, 6), 40, 0.0, seed=2)
    res = fit_stage1(data, "ols")
    np.testing.assert_allclose(res.w0_hat, w0, atol=1e-8)
    assert res.e1 <= 1e-8 and res.e2 >= 0


def test_ols_rank_deficient():
    data = generate_dataset(np.ones(10), SpdMatrix.identity(10), 5, 0.1, seed=0)
    with pytest.raises(RankDeficient):
        fit_stage1(data, "ols")


def test_stage1_without_truth():
    data = Dataset(np.eye(3), np.array([1.0, 2.0, 3.0]))
    res = fit_stage1(data, "ols")
    assert res.e1 is None and res.e2 is None
    np.testing.assert_allclose(res.w0_hat, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit_stage1(data, "ols", known_sigma=True)
    with pytest.raises(ValueError):
        fit_stage1(data, "bayes")


def test_known_sigma_has_no_covariance_error():
    w0, sigma = sparse_instance(20, 3, seed=1)
    data = generate_dataset(w0, sigma, 100, 0.5, seed=3)
    assert fit_stage1(data, "ols", known_sigma=True).e2 == 0.0
    assert fit_stage1(data, "ols", known_sigma=sigma).e2 == 0.0


def test_sqrt_lasso_beats_ridge_on_sparse_models():
    w0, sigma = sparse_instance(200, 10, seed=0)
    wins = 0
    for k in range(10):
        data = generate_dataset(w0, sigma, 1000, 0.5, seed=200 + k)
        lasso = fit_stage1(data, "sqrt_lasso", s_hint=10).e1
        ridge = fit_stage1(data, "ridge_cv").e1
        wins += lasso <= ridge
    assert wins >= 7


def test_sqrt_lasso_error_shrinks_with_n():
    w0, sigma = sparse_instance(200, 10, seed=0)
    med = []
    for n in (1000, 4000):
        errs = [fit_stage1(generate_dataset(w0, sigma, n, 0.5, seed=300 + k), "sqrt_lasso", s_hint=10).e1
                for k in range(10)]
        med.append(np.median(errs))
    assert med[1] <= med[0]


def test_stage1_determinism():
    w0, sigma = sparse_instance(30, 3, seed=2)
    a = fit_stage1(generate_dataset(w0, sigma, 80, 0.5, seed=4), "sqrt_lasso", s_hint=3)
    b = fit_stage1(generate_dataset(w0, sigma, 80, 0.5, seed=4), "sqrt_lasso", s_hint=3)
    assert a.w0_hat.tobytes() == b.w0_hat.tobytes()
    assert a.sigma_hat.entries.tobytes() == b.sigma_hat.entries.tobytes()


# -- two-stage fit ------------------------------------------------------------------

def _oracle_stage1(w0, sigma):
    return Stage1Result(np.array(w0, dtype=float), sigma, 0.0, 0.0, "oracle")


def _empty_data(w0, sigma):
    return Dataset(np.zeros((1, len(w0))), np.zeros(1), DatasetMeta(np.asarray(w0), sigma, 0.0, 0))


def test_zero_budget_returns_stage1_estimate():
    w0, sigma = sparse_instance(20, 3, seed=3)
    data = generate_dataset(w0, sigma, 100, 0.5, seed=5)
    res = two_stage_fit(data, AttackNorm.linf(), 0.0, stage1="ols")
    np.testing.assert_array_equal(res.w_hat, res.stage1.w0_hat)


@pytest.mark.parametrize("attack", [AttackNorm.l2(), AttackNorm.linf(), AttackNorm.l1()])
def test_oracle_inputs_reach_optimum(attack):
    rng = np.random.default_rng(11)
    for _ in range(3):
        w0, sigma = rng.standard_normal(2), random_sigma(rng, 2)
        r = float(rng.uniform(0.05, 1))
        prob = Problem(w0, sigma, attack, r)
        res = two_stage_fit(_empty_data(w0, sigma), attack, r, stage1=_oracle_stage1(w0, sigma))
        opt = optimal_risk_grid(prob, objective="proxy").value
        assert res.proxy_at_w_hat <= opt * (1 + 1e-4)
        assert res.true_risk <= ALPHA * optimal_risk_grid(prob).value * (1 + 1e-4)
        assert res.excess_bound == 0.0
        audit = consistency_audit(res, prob, constant=1.0, optimum=opt)
        assert audit.excess <= 1e-4 * opt and audit.holds


def test_two_stage_sandwich():
    rng = np.random.default_rng(12)
    for _ in range(5):
        w0, sigma = rng.standard_normal(2), random_sigma(rng, 2)
        attack = [AttackNorm.l2(), AttackNorm.linf()][int(rng.integers(2))]
        r = float(rng.uniform(0.05, 1))
        data = generate_dataset(w0, sigma, 50, 0.5, seed=int(rng.integers(1000)))
        res = two_stage_fit(data, attack, r, stage1="ols")
        assert optimal_risk_grid(Problem(w0, sigma, attack, r)).value <= res.true_risk * (1 + 1e-9)


def test_proxy_is_recomputable():
    w0, sigma = sparse_instance(30, 3, seed=5)
    data = generate_dataset(w0, sigma, 200, 0.5, seed=6)
    res = two_stage_fit(data, AttackNorm.linf(), 0.1, stage1="ols")
    s1 = res.stage1
    prob = Problem(s1.w0_hat, s1.sigma_hat, AttackNorm.linf(), 0.1)
    assert res.proxy_at_w_hat == pytest.approx(adversarial_risk(res.w_hat, prob).proxy, rel=1e-9)
    a = max(s1.sigma_hat.op_norm ** 2, float(s1.sigma_hat.quad(s1.w0_hat)))
    assert res.excess_bound == pytest.approx(a * (s1.e1 ** 2 + s1.e2 ** 2))
    truth = Problem(w0, sigma, AttackNorm.linf(), 0.1)
    assert res.true_risk == pytest.approx(adversarial_risk(res.w_hat, truth).exact)


def test_soft_threshold_stage2():
    w0, sigma = sparse_instance(30, 3, seed=6)
    data = generate_dataset(w0, sigma, 300, 0.5, seed=7)
    st = two_stage_fit(data, AttackNorm.linf(), 0.1, stage1="ols", stage2="soft_threshold")
    assert st.stage1.sigma_hat.is_diagonal
    pd = two_stage_fit(data, AttackNorm.linf(), 0.1, stage1=st.stage1)
    assert st.proxy_at_w_hat <= pd.proxy_at_w_hat * (1 + 1e-4)
    with pytest.raises(WrongNorm):
        two_stage_fit(data, AttackNorm.l2(), 0.1, stage2="soft_threshold")
    with pytest.raises(ValueError):
        two_stage_fit(data, AttackNorm.linf(), 0.1, stage1="ols", stage2="newton")


def test_two_stage_determinism():
    w0, sigma = sparse_instance(30, 3, seed=8)
    runs = [two_stage_fit(generate_dataset(w0, sigma, 100, 0.5, seed=1), AttackNorm.linf(), 0.05,
                          s_hint=3, cov_mode="ridge") for _ in range(2)]
    assert runs[0].w_hat.tobytes() == runs[1].w_hat.tobytes()
    assert runs[0].true_risk == runs[1].true_risk


def test_true_risk_improves_with_n():
    w0, sigma = sparse_instance(200, 10, seed=0)
    med = []
    for n in (250, 1000, 4000):
        risks = [two_stage_fit(generate_dataset(w0, sigma, n, 0.5, seed=1000 + k), AttackNorm.linf(), 0.05,
                               s_hint=10, stage2="soft_threshold").true_risk for k in range(5)]
        med.append(np.median(risks))
    assert med[0] >= med[1] >= med[2]


# -- consistency audit ---------------------------------------------------------------

def test_proxy_optimum_oracles():
    rng = np.random.default_rng(13)
    w0, sigma = sparse_instance(10, 3, seed=1)
    assert proxy_optimum(Problem(w0, sigma, AttackNorm.linf(), 0.1)).method == "soft_threshold"
    prob = Problem(rng.standard_normal(5), random_sigma(rng, 5), AttackNorm.l2(), 0.3)
    assert proxy_optimum(prob).value <= adversarial_risk(prob.w0, prob).proxy
    with pytest.raises(NoOracle):
        proxy_optimum(Problem(rng.standard_normal(5), random_sigma(rng, 5), AttackNorm.linf(), 0.3))


def _sparse_excesses(n, seeds, known_sigma=True):
    w0, sigma = sparse_instance(50, 5, seed=0)
    prob = Problem(w0, sigma, AttackNorm.linf(), 0.05)
    opt = proxy_optimum(prob).value
    out = []
    for k in seeds:
        data = generate_dataset(w0, sigma, n, 0.5, seed=k)
        res = two_stage_fit(data, AttackNorm.linf(), 0.05, stage2="soft_threshold", s_hint=5,
                            known_sigma=known_sigma)
        out.append((res, prob, opt))
    return out


def test_excess_shrinks_when_errors_halve():
    seeds = range(100, 110)
    med = [np.median([consistency_audit(res, prob, 0.0, opt).excess for res, prob, opt in
                      _sparse_excesses(n, seeds)]) for n in (250, 1000, 4000)]
    assert med[0] >= 2 * med[1]
    assert med[1] >= 2 * med[2]


def test_calibrated_constant_with_known_covariance():
    calib = _sparse_excesses(1000, range(100, 110))
    C = calibrate_constant([c[0] for c in calib], [c[1] for c in calib])
    assert C > 0
    held = [consistency_audit(res, prob, C, opt) for res, prob, opt in _sparse_excesses(1000, range(200, 210))]
    # a max over ten runs is exceeded by some fresh runs, but only by a small factor
    assert sum(a.holds for a in held) >= 7
    assert max(a.excess / a.bound for a in held) <= 2.0
    assert all(res.stage1.e2 == 0.0 for res, _, _ in calib)


def test_calibration_validation():
    with pytest.raises(ValueError):
        calibrate_constant([], [])


def _perturbed_excess(rng, w0, sigma, attack, r, scale, opt):
    # stage 2 by the exact grid oracle so that only estimation error enters
    d1 = scale * rng.standard_normal(2)
    B = scale * rng.standard_normal((2, 2))
    d2 = 0.5 * (B + B.T)
    s_hat = spd_from_dense(sigma.entries + d2)
    s1 = Stage1Result(w0 + d1, s_hat, float(np.linalg.norm(d1)), float(np.linalg.norm(d2, 2)), "perturbed")
    fit = optimal_risk_grid(Problem(s1.w0_hat, s_hat, attack, r), objective="proxy")
    res = TwoStageResult(fit.minimizer, s1, "grid", fit.value)
    prob = Problem(w0, sigma, attack, r)
    return consistency_audit(res, prob, 0.0, opt).excess, s1.e1, s1.e2


def _kink_instance():
    # small budget: the optimum sits at w0, where ||w - w0||_S is not differentiable
    rng = np.random.default_rng(0)
    A = rng.standard_normal((2, 2))
    sigma = spd_from_dense(A.T @ A + 0.3 * np.eye(2))
    w0 = rng.standard_normal(2)
    return w0, sigma, AttackNorm.l2(), 0.5


def test_perturbation_excess_first_order():
    # the excess of the square-root proxy is at most linear in the errors
    w0, sigma, attack, r = _kink_instance()
    prob = Problem(w0, sigma, attack, r)
    opt = optimal_risk_grid(prob, objective="proxy").value
    rng = np.random.default_rng(14)
    worst = 0.0
    for scale in np.logspace(-4, -1, 1000):
        excess, e1, e2 = _perturbed_excess(rng, w0, sigma, attack, r, scale, opt)
        root = math.sqrt(opt + max(excess, 0.0)) - math.sqrt(opt)
        worst = max(worst, root / (e1 + e2))
    assert worst <= 2 * (sigma.op_norm + math.sqrt(sigma.quad(w0)) + 1)


@pytest.mark.xfail(strict=True, reason="excess is first order in (e1, e2) when the optimum is at w0; see ledger")
def test_perturbation_excess_over_squared_errors_bounded():
    w0, sigma, attack, r = _kink_instance()
    prob = Problem(w0, sigma, attack, r)
    opt = optimal_risk_grid(prob, objective="proxy").value
    rng = np.random.default_rng(15)
    ratios = {}
    for scale in (1e-1, 1e-3):
        vals = []
        for _ in range(30):
            excess, e1, e2 = _perturbed_excess(rng, w0, sigma, attack, r, scale, opt)
            vals.append(excess / (e1 ** 2 + e2 ** 2))
        ratios[scale] = np.median(vals)
    assert ratios[1e-3] <= 10 * ratios[1e-1]
