"""Figure experiments at desk scale.

Each ``cmd_*`` function takes an :class:`ExperimentConfig`, returns a
:class:`FigureResult` holding the curve table, the invariant checks run on
it and the plot layout. Replicates fan out over a process pool when
``cfg.workers > 1``; rows are sorted before writing so the CSV does not
depend on scheduling.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from ..core import AttackNorm, SpdMatrix, spd_from_dense
from ..estimators import fit_stage1, generate_dataset, sparse_instance, two_stage_fit
from ..paths import (
    GdPlusConfig,
    early_stop,
    gdplus_point,
    mahalanobis_counterexample,
    sufficient_condition_check,
)
from ..risk import (
    ALPHA,
    BETA,
    Problem,
    adversarial_risk,
    chord_optimum,
    optimal_risk_grid,
    optimal_risk_ridge_path,
)
from ..solvers import PdConfig, fit_gdplus_diag_M, soft_threshold_path
from .config import CurveTable, ExperimentConfig

__all__ = [
    "Check",
    "FigureResult",
    "random_instance",
    "cmd_fig_l2",
    "cmd_fig_mahalanobis",
    "cmd_fig_sufficient",
    "cmd_fig_lp",
    "cmd_fig_twostage",
    "cmd_fig_compare",
    "FIGURES",
]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class FigureResult:
    table: CurveTable
    checks: List[Check] = field(default_factory=list)
    title: str = ""
    xlabel: str = "r"
    ylabel: str = "risk"
    logx: bool = False
    logy: bool = False

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def _pmap(fn: Callable, jobs: Sequence, workers: int) -> List:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _collect(vocab, parts) -> CurveTable:
    table = CurveTable(tuple(vocab))
    for rows in parts:
        for row in rows:
            table.add(*row)
    return table


def random_instance(seed: int, d: int):
    """Gaussian ``w0`` and a covariance with Exponential(1) eigenvalues in a random basis."""
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal(d)
    lam = rng.exponential(1.0, d) + 1e-3
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    S = (Q * lam) @ Q.T
    return w0, spd_from_dense(0.5 * (S + S.T))


def _grouped(table: CurveTable, name: str) -> Dict[float, List[float]]:
    out: Dict[float, List[float]] = {}
    for x, s, y, _ in table.rows:
        if s == name:
            out.setdefault(x, []).append(y)
    return out


# -- Euclidean attacks: early-stopped GD against the optimum ---------------

def _l2_job(args):
    seed, d, r_grid = args
    w0, sigma = random_instance(seed, d)
    rows = []
    for r in r_grid:
        prob = Problem(w0, sigma, AttackNorm.l2(), r)
        es = early_stop(prob)
        grid = optimal_risk_grid(prob)
        ridge = optimal_risk_ridge_path(prob)
        best = grid if grid.value <= ridge.value else ridge
        rows += [
            (r, "gd_adv", es.risk_opt, seed),
            (r, "gd_std", adversarial_risk(es.w_opt, prob).standard, seed),
            (r, "opt_adv", best.value, seed),
            (r, "opt_std", adversarial_risk(best.minimizer, prob).standard, seed),
        ]
    return rows


def cmd_fig_l2(cfg: ExperimentConfig) -> FigureResult:
    """Early-stopped GD versus the optimal risk under Euclidean attacks."""
    d = cfg.dims[0]
    jobs = [(cfg.seed + k, d, cfg.r_grid) for k in range(cfg.replicate_count)]
    table = _collect(("gd_adv", "gd_std", "opt_adv", "opt_std"), _pmap(_l2_job, jobs, cfg.workers))
    gd = {(x, sd): y for x, s, y, sd in table.rows if s == "gd_adv"}
    opt = {(x, sd): y for x, s, y, sd in table.rows if s == "opt_adv"}
    worst = max(gd[k] / opt[k] for k in gd if opt[k] > 0) if any(v > 0 for v in opt.values()) else 1.0
    zero = [max(gd[k], opt[k]) for k in gd if k[0] == 0.0]
    checks = [
        Check("gd_within_beta", all(gd[k] <= BETA * opt[k] * (1 + 1e-6) + 1e-12 for k in gd),
              f"max ratio {worst:.6g}"),
        Check("zero_budget_zero_risk", all(v <= 1e-8 for v in zero), f"{len(zero)} rows"),
    ]
    return FigureResult(table, checks, "Euclidean attacks: GD vs optimum")


# -- Mahalanobis counterexample --------------------------------------------

def cmd_fig_mahalanobis(cfg: ExperimentConfig) -> FigureResult:
    """GD, GD+ (``M = B^{1/2}``) and the optimum as the attack norm degenerates."""
    r = cfg.r_grid[0] if cfg.r_grid else 1.0
    table = CurveTable(("gd", "gdplus", "opt"))
    ratios = []
    for m in cfg.m_values:
        prob, plus = mahalanobis_counterexample(int(m), r)
        gd = early_stop(prob).risk_opt
        gp = early_stop(prob, plus).risk_opt
        opt = optimal_risk_grid(prob).value
        table.add(m, "gd", gd, cfg.seed)
        table.add(m, "gdplus", gp, cfg.seed)
        table.add(m, "opt", opt, cfg.seed)
        ratios.append((m, gd / opt, gp / opt, opt))
    opts = [o for _, _, _, o in ratios]
    tail = [g for m, g, _, _ in ratios if m >= 10]
    checks = [
        Check("opt_non_increasing", all(b <= a * (1 + 1e-9) for a, b in zip(opts, opts[1:]))),
        Check("gd_ratio_non_decreasing", all(b >= a * (1 - 1e-9) for a, b in zip(tail, tail[1:])),
              " ".join(f"{g:.4g}" for g in tail)),
        Check("gdplus_within_beta", all(p <= BETA * (1 + 1e-4) for _, _, p, _ in ratios),
              f"max {max(p for _, _, p, _ in ratios):.6g}"),
    ]
    if len(tail) >= 2:
        checks.append(Check("gd_ratio_growth", tail[-1] >= 5.0 * tail[0], f"{tail[-1] / tail[0]:.4g}x"))
    return FigureResult(table, checks, "Mahalanobis attacks", xlabel="m", logx=True, logy=True)


# -- uniform shrinkage under a sufficient condition --------------------------

def cmd_fig_sufficient(cfg: ExperimentConfig) -> FigureResult:
    """Best uniform shrinkage against the optimum for ``w0 = (1, 1)``, ``l_inf`` attacks."""
    w0 = np.ones(2)
    sigma = SpdMatrix.identity(2)
    table = CurveTable(("shrink_adv", "shrink_std", "opt_adv", "opt_std"))
    ok = True
    c = sufficient_condition_check(Problem(w0, sigma, AttackNorm.linf(), 1.0))
    factor = max(1.0, 1.0 / c ** 2) * ALPHA
    for r in cfg.r_grid:
        prob = Problem(w0, sigma, AttackNorm.linf(), r)
        ch = chord_optimum(prob)
        opt = optimal_risk_grid(prob)
        table.add(r, "shrink_adv", ch.value, cfg.seed)
        table.add(r, "shrink_std", adversarial_risk(ch.minimizer, prob).standard, cfg.seed)
        table.add(r, "opt_adv", opt.value, cfg.seed)
        table.add(r, "opt_std", adversarial_risk(opt.minimizer, prob).standard, cfg.seed)
        ok &= ch.value <= factor * opt.value * (1 + 1e-9) + 1e-15
    return FigureResult(table, [Check("shrink_within_bound", ok, f"c={c:.6g}")],
                        "Uniform shrinkage, l_inf attacks")


# -- l_inf attacks with a fitted diagonal GD+ --------------------------------

def _lp_job(args):
    seed, r_grid = args
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal(2)
    lam = rng.exponential(1.0, 2) + 1e-3
    sigma = SpdMatrix.diag(lam)
    rows, worst = [], 0.0
    for r in r_grid:
        prob = Problem(w0, sigma, AttackNorm.linf(), r)
        w_opt = soft_threshold_path(w0, lam, r).best_w
        M = fit_gdplus_diag_M(w0, w_opt, sigma, t=1.0)
        plus = adversarial_risk(gdplus_point(prob, GdPlusConfig(M), 1.0), prob)
        opt = optimal_risk_grid(prob).value
        gd = early_stop(prob).risk_opt
        rows += [
            (r, "gdplus_adv", plus.exact, seed),
            (r, "gdplus_proxy", plus.proxy, seed),
            (r, "gd_adv", gd, seed),
            (r, "opt_adv", opt, seed),
        ]
        worst = max(worst, plus.proxy / opt if opt > 0 else 1.0)
    return rows, worst


def cmd_fig_lp(cfg: ExperimentConfig) -> FigureResult:
    """GD+ with a diagonal ``M`` fitted to the proxy minimiser, ``l_inf`` attacks."""
    jobs = [(cfg.seed + k, cfg.r_grid) for k in range(cfg.replicate_count)]
    out = _pmap(_lp_job, jobs, cfg.workers)
    table = _collect(("gdplus_adv", "gdplus_proxy", "gd_adv", "opt_adv"), [rows for rows, _ in out])
    worst = max(w for _, w in out)
    checks = [Check("gdplus_proxy_within_alpha", worst <= ALPHA * (1 + 1e-4), f"max ratio {worst:.6g}")]
    return FigureResult(table, checks, "l_inf attacks: GD+ with fitted M")


# -- two-stage estimator -----------------------------------------------------

def _twostage_job(args):
    n, data_seed, inst_seed, d, s, sigma_eps, r_grid, max_iter = args
    w0, sigma = sparse_instance(d, s, inst_seed)
    data = generate_dataset(w0, sigma, n, sigma_eps, data_seed)
    s1 = fit_stage1(data, "sqrt_lasso", s_hint=s, cov_mode="diagonal")
    att = AttackNorm.linf()
    cfg = PdConfig(max_iter=max_iter)
    rows = []
    for r in r_grid:
        st = two_stage_fit(data, att, r, s1, "soft_threshold")
        pd = two_stage_fit(data, att, r, s1, "primal_dual", pd_config=cfg)
        rows.append((r, f"onestage_plus_st@n{n}", st.true_risk, data_seed))
        rows.append((r, f"onestage_plus_pd@n{n}", pd.true_risk, data_seed))
    return rows


def _median_monotone(table: CurveTable, bases: Sequence[str], ns: Sequence[int]) -> Tuple[bool, str]:
    ok, worst = True, []
    for base in bases:
        meds = [{x: float(np.median(v)) for x, v in _grouped(table, f"{base}@n{n}").items()} for n in ns]
        for x in meds[0]:
            seq = [m[x] for m in meds]
            good = all(b <= a for a, b in zip(seq, seq[1:]))
            ok &= good
            if not good:
                worst.append(f"{base} r={x:g}")
    return ok, ", ".join(worst) or "all medians decrease"


def cmd_fig_twostage(cfg: ExperimentConfig) -> FigureResult:
    """True adversarial risk of the two-stage estimator against the budget, per sample size."""
    d = cfg.dims[0]
    s = min(cfg.sparsity, d)
    ns = sorted(cfg.ns)
    jobs = [
        (n, cfg.seed * 1000 + k, cfg.seed, d, s, cfg.sigma_eps, cfg.r_grid, cfg.max_iter)
        for n in ns for k in range(cfg.replicate_count)
    ]
    table = _collect(("onestage_plus_st", "onestage_plus_pd"), _pmap(_twostage_job, jobs, cfg.workers))
    ok, detail = _median_monotone(table, ("onestage_plus_st", "onestage_plus_pd"), ns)
    return FigureResult(table, [Check("median_risk_non_increasing_in_n", ok, detail)],
                        "Two-stage estimator, l_inf attacks", logx=True)


# -- Euclidean attacks: two-stage against the ridge-path competitor ---------

def _compare_job(args):
    n, data_seed, inst_seed, d, s, sigma_eps, r_grid, max_iter = args
    w0, sigma = sparse_instance(d, s, inst_seed)
    data = generate_dataset(w0, sigma, n, sigma_eps, data_seed)
    s1 = fit_stage1(data, "sqrt_lasso", s_hint=s)
    att = AttackNorm.l2()
    cfg = PdConfig(max_iter=max_iter)
    rows = []
    for r in r_grid:
        truth = Problem(w0, sigma, att, r)
        ours = two_stage_fit(data, att, r, s1, "primal_dual", pd_config=cfg)
        est = Problem(s1.w0_hat, s1.sigma_hat, att, r)
        ridge_w = optimal_risk_ridge_path(est).minimizer
        a = adversarial_risk(ours.w_hat, truth)
        b = adversarial_risk(ridge_w, truth)
        tag = f"@r{r:g}"
        rows += [
            (n, "twostage_adv" + tag, a.exact, data_seed),
            (n, "twostage_std" + tag, a.standard, data_seed),
            (n, "ridge_adv" + tag, b.exact, data_seed),
            (n, "ridge_std" + tag, b.standard, data_seed),
        ]
    return rows


def cmd_fig_compare(cfg: ExperimentConfig) -> FigureResult:
    """Two-stage estimator against the ridge-path competitor on the same Stage-1 fit."""
    d = cfg.dims[0]
    s = min(cfg.sparsity, d)
    ns = sorted(cfg.ns)
    jobs = [
        (n, cfg.seed * 1000 + k, cfg.seed, d, s, cfg.sigma_eps, cfg.r_grid, cfg.max_iter)
        for n in ns for k in range(cfg.replicate_count)
    ]
    vocab = ("twostage_adv", "twostage_std", "ridge_adv", "ridge_std")
    table = _collect(vocab, _pmap(_compare_job, jobs, cfg.workers))
    ok, gaps = True, []
    for r in cfg.r_grid:
        ours = float(np.median(_grouped(table, f"twostage_adv@r{r:g}")[float(ns[-1])]))
        theirs = float(np.median(_grouped(table, f"ridge_adv@r{r:g}")[float(ns[-1])]))
        gap = abs(ours - theirs) / theirs if theirs > 0 else abs(ours - theirs)
        gaps.append(gap)
        ok &= gap <= 0.05
    checks = [Check("gap_at_largest_n", ok, "max gap " + f"{max(gaps):.4g}")]
    return FigureResult(table, checks, "Euclidean attacks: two-stage vs ridge path",
                        xlabel="n", logx=True)


FIGURES = {
    "fig-l2": cmd_fig_l2,
    "fig-mahalanobis": cmd_fig_mahalanobis,
    "fig-sufficient": cmd_fig_sufficient,
    "fig-lp": cmd_fig_lp,
    "fig-twostage": cmd_fig_twostage,
    "fig-compare": cmd_fig_compare,
}
