"""Invariant suite behind ``advreg check``.

Every check draws its random instances from a generator seeded by the run
seed and the check's position, so the table is reproducible.
"""
from __future__ import annotations

import math
from typing import Callable, List, Tuple

import numpy as np

from ..core import AttackNorm, SpdMatrix, jacobi_eigh, spd_from_dense
from ..estimators import generate_dataset
from ..paths import early_stop, mahalanobis_counterexample
from ..risk import (
    ALPHA,
    BETA,
    C0,
    Problem,
    adversarial_risk,
    chord_optimum,
    mc_risk,
    optimal_risk_grid,
    optimal_risk_ridge_path,
    risk_values,
)
from ..solvers import (
    PdConfig,
    chambolle_pock,
    project_l1_ball,
    project_linf_ball,
    prox_dual_norm,
    soft_threshold_path,
)
from .config import CurveTable, ExperimentConfig
from .figures import Check, FigureResult, random_instance

__all__ = ["cmd_check", "CHECKS"]

_NORMS = [
    AttackNorm.l1(), AttackNorm.lp(1.5), AttackNorm.l2(), AttackNorm.lp(3.0), AttackNorm.linf(),
]


def _attack(rng, d):
    k = int(rng.integers(len(_NORMS) + 1))
    if k < len(_NORMS):
        return _NORMS[k]
    _, B = random_instance(int(rng.integers(2 ** 31)), d)
    return AttackNorm.mahalanobis(B)


def check_sandwich(rng, cfg) -> Tuple[bool, float]:
    """``E <= proxy <= ALPHA * E`` on random models and norms."""
    worst = 1.0
    ok = True
    for _ in range(50 * cfg.replicate_count):
        d = int(rng.choice(cfg.dims))
        w0, sigma = random_instance(int(rng.integers(2 ** 31)), d)
        prob = Problem(w0, sigma, _attack(rng, d), float(rng.uniform(0, 2)))
        rep = adversarial_risk(rng.standard_normal(d), prob)
        ok &= rep.exact <= rep.proxy * (1 + 1e-12) and rep.proxy <= ALPHA * rep.exact * (1 + 1e-9)
        worst = max(worst, rep.proxy / rep.exact)
    return ok, worst


def check_monte_carlo(rng, cfg) -> Tuple[bool, float]:
    """Closed-form risk against a Monte-Carlo estimate (4 standard errors)."""
    worst = 0.0
    for _ in range(3):
        d = int(rng.choice(cfg.dims))
        w0, sigma = random_instance(int(rng.integers(2 ** 31)), d)
        prob = Problem(w0, sigma, _attack(rng, d), float(rng.uniform(0.1, 1)))
        w = rng.standard_normal(d)
        mean, se = mc_risk(w, prob, samples=50_000, seed=int(rng.integers(2 ** 31)))
        worst = max(worst, abs(mean - adversarial_risk(w, prob).exact) / se)
    return worst <= 4.0, worst


def check_chord(rng, cfg) -> Tuple[bool, float]:
    """Closed-form best shrinkage against a dense grid over ``[0, 1]``."""
    gam = np.linspace(0.0, 1.0, 100_001)
    worst = 0.0
    for _ in range(10):
        d = int(rng.choice(cfg.dims))
        w0, sigma = random_instance(int(rng.integers(2 ** 31)), d)
        prob = Problem(w0, sigma, _attack(rng, d), float(rng.uniform(0, 3)))
        grid = float(np.min(risk_values(gam[:, None] * w0, prob)))
        worst = max(worst, abs(chord_optimum(prob).value - grid))
    return worst <= 1e-8, worst


def check_gd_beta(rng, cfg) -> Tuple[bool, float]:
    """Early-stopped GD within ``BETA`` of the ridge-path optimum."""
    worst = 0.0
    for _ in range(cfg.replicate_count):
        d = int(rng.integers(1, 11))
        w0, sigma = random_instance(int(rng.integers(2 ** 31)), d)
        prob = Problem(w0, sigma, AttackNorm.l2(), float(rng.uniform(0.05, 2)))
        worst = max(worst, early_stop(prob).risk_opt / optimal_risk_ridge_path(prob).value)
    return worst <= BETA * (1 + 1e-6), worst


def check_isotropic(rng, cfg) -> Tuple[bool, float]:
    """With identity covariance early-stopped GD is optimal."""
    worst = 0.0
    for _ in range(cfg.replicate_count):
        d = int(rng.integers(1, 11))
        prob = Problem(rng.standard_normal(d), SpdMatrix.identity(d), AttackNorm.l2(),
                       float(rng.uniform(0.05, 2)))
        a, b = early_stop(prob).risk_opt, optimal_risk_ridge_path(prob).value
        worst = max(worst, abs(a - b) / b)
    return worst <= 1e-6, worst


def check_mahalanobis(rng, cfg) -> Tuple[bool, float]:
    """GD degrades as ``m`` grows while GD+ stays within ``BETA``."""
    ratios, plus = [], []
    for m in (10, 100, 1000):
        prob, gp = mahalanobis_counterexample(m)
        opt = optimal_risk_grid(prob).value
        ratios.append(early_stop(prob).risk_opt / opt)
        plus.append(early_stop(prob, gp).risk_opt / opt)
    ok = all(b >= a for a, b in zip(ratios, ratios[1:])) and max(plus) <= BETA * (1 + 1e-4)
    return ok, ratios[-1]


def check_moreau(rng, cfg) -> Tuple[bool, float]:
    """``prox_{s||.||_*}(v) + s proj(v / s) = v`` for the l1/l_inf pair."""
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 20))
        v = rng.standard_normal(d) * 3
        s = float(rng.uniform(0.01, 3))
        a = prox_dual_norm(v, s, AttackNorm.linf()) + s * project_linf_ball(v / s)
        b = prox_dual_norm(v, s, AttackNorm.l1()) + s * project_l1_ball(v / s, 1.0)
        worst = max(worst, float(np.max(np.abs(a - v))), float(np.max(np.abs(b - v))))
    return worst <= 1e-10, worst


def check_solvers(rng, cfg) -> Tuple[bool, float]:
    """Primal-dual and soft-threshold path agree on diagonal l_inf instances."""
    worst = 0.0
    ok = True
    for _ in range(3):
        d = int(rng.integers(2, 21))
        lam = rng.exponential(1.0, d) + 0.05
        w0 = rng.standard_normal(d)
        r = float(rng.uniform(0.01, 0.5))
        st = soft_threshold_path(w0, lam, r).best_value
        w, _ = chambolle_pock(w0, SpdMatrix.diag(lam), AttackNorm.linf(), r, PdConfig(max_iter=20_000))
        pd = (math.sqrt(float(np.sum(lam * (w - w0) ** 2))) + r * float(np.abs(w).sum())) ** 2
        worst = max(worst, abs(pd - st) / st)
        ok &= bool(np.all(np.abs(w) <= np.abs(w0) + 1e-8)) and bool(np.all(w * w0 >= -1e-12))
    return ok and worst <= 1e-4, worst


def check_eigensolvers(rng, cfg) -> Tuple[bool, float]:
    """Jacobi rotations reproduce the LAPACK spectrum."""
    worst = 0.0
    for d in cfg.dims:
        A = rng.standard_normal((d, d))
        S = A @ A.T + d * np.eye(d)
        vals, _, _ = jacobi_eigh(S)
        ref = spd_from_dense(S).eigvals
        worst = max(worst, float(np.max(np.abs(vals - ref)) / ref[0]))
    return worst <= 1e-10, worst


def check_determinism(rng, cfg) -> Tuple[bool, float]:
    """Identical seeds give bit-identical datasets."""
    w0, sigma = random_instance(cfg.seed, 5)
    a = generate_dataset(w0, sigma, 50, 0.3, cfg.seed)
    b = generate_dataset(w0, sigma, 50, 0.3, cfg.seed)
    same = a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    return same, float(same)


def check_constants(rng, cfg) -> Tuple[bool, float]:
    """``c0 = E|N(0, 1)|`` and ``ALPHA = 2 / (1 + c0)``."""
    err = abs(C0 - math.sqrt(2 / math.pi)) + abs(ALPHA - 2 / (1 + C0))
    return err <= 1e-15, err


CHECKS: List[Tuple[str, Callable]] = [
    ("constants", check_constants),
    ("sandwich", check_sandwich),
    ("monte_carlo", check_monte_carlo),
    ("chord_vs_grid", check_chord),
    ("gd_within_beta", check_gd_beta),
    ("isotropic_exact", check_isotropic),
    ("mahalanobis_growth", check_mahalanobis),
    ("moreau_identity", check_moreau),
    ("solver_agreement", check_solvers),
    ("eigensolvers", check_eigensolvers),
    ("dataset_determinism", check_determinism),
]


def cmd_check(cfg: ExperimentConfig) -> FigureResult:
    """Run every invariant check; the table records one metric and one pass flag per check."""
    table = CurveTable(("metric", "passed"))
    checks = []
    for k, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([cfg.seed, k])
        ok, metric = fn(rng, cfg)
        table.add(k, f"metric@{name}", float(metric), cfg.seed)
        table.add(k, f"passed@{name}", float(bool(ok)), cfg.seed)
        checks.append(Check(name, bool(ok), f"{metric:.6g}"))
    return FigureResult(table, checks, "Invariant suite", xlabel="check", ylabel="value")
