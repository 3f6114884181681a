"""Adversarial risk of linear predictors and oracles for its optimum.

For ``x ~ N(0, Sigma)`` and an attacker bounded by ``||delta|| <= r`` the
worst-case squared error of a linear model ``w`` has the closed form::

    E(w) = ||w - w0||_S^2 + r^2 ||w||_*^2 + 2 c0 r ||w - w0||_S ||w||_*

with ``c0 = sqrt(2/pi)``. The proxy ``(||w - w0||_S + r ||w||_*)^2`` is convex
and sandwiches it: ``E <= proxy <= ALPHA * E``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .core import AttackNorm, SpdMatrix, as_vector
from .errors import DimensionTooLarge, WrongNorm, ZeroModel

__all__ = [
    "C0",
    "ALPHA",
    "BETA",
    "Problem",
    "RiskReport",
    "OptReport",
    "adversarial_risk",
    "risk_values",
    "mc_risk",
    "optimal_risk_grid",
    "optimal_risk_ridge_path",
    "ridge_point",
    "chord_optimum",
    "chord_thresholds",
]

C0 = 0.7978845608028654  # sqrt(2/pi), mean of |N(0, 1)|
ALPHA = 2.0 / (1.0 + C0)  # 1.1124...
BETA = 1.6862


@dataclass(frozen=True, eq=False)
class Problem:
    """Population regression problem under test-time attacks.

    ``w0`` is the generative model, ``sigma`` the feature covariance,
    ``attack`` the attacker's norm and ``r`` its budget.
    """

    w0: np.ndarray
    sigma: SpdMatrix
    attack: AttackNorm
    r: float

    def __post_init__(self):
        w0 = as_vector(self.w0, self.sigma.dim)
        w0.setflags(write=False)
        object.__setattr__(self, "w0", w0)
        if self.attack.B is not None and self.attack.B.dim != self.sigma.dim:
            raise ValueError("attack norm and covariance dimensions differ")
        if not (math.isfinite(self.r) and self.r >= 0):
            raise ValueError("r must be finite and non-negative")

    @property
    def dim(self) -> int:
        return self.sigma.dim

    def with_r(self, r: float) -> "Problem":
        return replace(self, r=float(r))


@dataclass(frozen=True)
class RiskReport:
    exact: float
    proxy: float
    bias_term: float
    attack_term: float

    @property
    def standard(self) -> float:
        """Ordinary (unattacked) risk ``||w - w0||_S^2``."""
        return self.bias_term ** 2


@dataclass(frozen=True, eq=False)
class OptReport:
    value: float
    minimizer: np.ndarray
    method: str
    certified_upper: bool


def risk_values(W, prob: Problem, objective: str = "exact") -> np.ndarray:
    """Vectorised exact or proxy risk for a stack of models (rows of ``W``)."""
    W = np.asarray(W, dtype=float)
    bias = np.sqrt(np.maximum(prob.sigma.quad(W - prob.w0), 0.0))
    att = prob.r * prob.attack.dual_norm(W)
    if objective == "exact":
        return bias * bias + att * att + 2.0 * C0 * bias * att
    if objective == "proxy":
        return (bias + att) ** 2
    raise ValueError(f"unknown objective {objective!r}")


def adversarial_risk(w, prob: Problem) -> RiskReport:
    w = as_vector(w, prob.dim)
    bias = math.sqrt(max(float(prob.sigma.quad(w - prob.w0)), 0.0))
    att = prob.r * float(prob.attack.dual_norm(w))
    exact = bias * bias + att * att + 2.0 * C0 * bias * att
    return RiskReport(exact, (bias + att) ** 2, bias, att)


def mc_risk(w, prob: Problem, samples: int = 200_000, seed: int = 0) -> Tuple[float, float]:
    """Monte-Carlo estimate of the adversarial risk and its standard error.

    Each draw uses the pointwise worst case
    ``sup_{||d|| <= r} ((x + d)^T w - x^T w0)^2 = (|x^T (w - w0)| + r ||w||_*)^2``.
    """
    if samples < 100:
        raise ValueError("use at least 100 samples")
    w = as_vector(w, prob.dim)
    rng = np.random.default_rng(seed)
    root = prob.sigma.sqrt()
    x = rng.standard_normal((samples, prob.dim)) @ root
    per = (np.abs(x @ (w - prob.w0)) + prob.r * float(prob.attack.dual_norm(w))) ** 2
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(samples))


def optimal_risk_grid(
    prob: Problem,
    radius: float | None = None,
    points_per_axis: int = 41,
    objective: str = "exact",
    zoom_levels: int = 40,
) -> OptReport:
    """Grid-search oracle for the optimal risk in dimension at most 3.

    An exhaustive grid over ``[-radius, radius]^d`` is followed by repeated
    re-gridding of a shrinking box around the incumbent and a final
    coordinate-wise line search. Every value is attained by the returned
    minimizer, so the result is an upper bound on the true optimum.
    """
    d = prob.dim
    if d > 3:
        raise DimensionTooLarge("grid oracle supports d <= 3")
    if points_per_axis < 11:
        raise ValueError("points_per_axis must be at least 11")
    if radius is None:
        radius = 2.0 * float(np.linalg.norm(prob.w0))
    if radius <= 0:
        return _report(np.zeros(d), prob, "grid", objective)

    def best_on_box(center, half):
        axes = [np.linspace(c - half, c + half, points_per_axis) for c in center]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = risk_values(mesh, prob, objective)
        k = int(np.argmin(vals))
        return mesh[k], float(vals[k])

    best, val = best_on_box(np.zeros(d), radius)
    for cand in (np.zeros(d), np.array(prob.w0)):
        cv = float(risk_values(cand, prob, objective))
        if cv < val:
            best, val = cand, cv
    half = radius
    step = 2.0 * radius / (points_per_axis - 1)
    for _ in range(zoom_levels):
        half = 2.0 * step
        step = 2.0 * half / (points_per_axis - 1)
        cand, cv = best_on_box(best, half)
        if cv <= val:
            best, val = cand, cv
        if half < 1e-13 * radius:
            break

    best = best.copy()
    for _ in range(3):
        for j in range(d):
            def f(x, j=j):
                trial = best.copy()
                trial[j] = x
                return float(risk_values(trial, prob, objective))

            res = minimize_scalar(
                f, bounds=(best[j] - half - step, best[j] + half + step),
                method="bounded", options={"xatol": 1e-14 * radius},
            )
            if res.fun < val:
                best[j], val = res.x, float(res.fun)
    return _report(best, prob, "grid", objective)


def ridge_point(prob: Problem, beta: float) -> np.ndarray:
    """Ridge solution ``(beta I + S)^{-1} S w0``; ``beta = inf`` gives zero."""
    if math.isinf(beta):
        return np.zeros(prob.dim)
    lam = prob.sigma.eigvals
    V = prob.sigma.eigvecs
    return V @ (lam / (beta + lam) * (V.T @ prob.w0))


def optimal_risk_ridge_path(
    prob: Problem, objective: str = "exact", points: int = 400
) -> OptReport:
    """Minimise the risk along the ridge path; exact for Euclidean attacks.

    Both the adversarial risk and its proxy are minimised by ridge
    estimators when the attack is Euclidean, so a 1-D search over the
    regularisation strength (log grid over ``[1e-8, 1e8]`` plus the two
    endpoints, then a bounded line search in ``log10(beta)``) is exact.
    """
    if not prob.attack.is_euclidean:
        raise WrongNorm("ridge-path oracle requires a Euclidean attack")
    logb = np.linspace(-8.0, 8.0, points)
    W = np.array([ridge_point(prob, 10.0 ** b) for b in logb])
    vals = risk_values(W, prob, objective)
    k = int(np.argmin(vals))
    best_w, best_v = W[k], float(vals[k])

    lo, hi = logb[max(k - 1, 0)], logb[min(k + 1, points - 1)]
    res = minimize_scalar(
        lambda b: float(risk_values(ridge_point(prob, 10.0 ** b), prob, objective)),
        bounds=(lo, hi), method="bounded", options={"xatol": 1e-12},
    )
    if res.fun < best_v:
        best_w, best_v = ridge_point(prob, 10.0 ** res.x), float(res.fun)
    for end in (np.array(prob.w0), np.zeros(prob.dim)):
        ev = float(risk_values(end, prob, objective))
        if ev <= best_v:
            best_w, best_v = end, ev
    return _report(best_w, prob, "ridge_path", objective)


def chord_thresholds(prob: Problem) -> Tuple[float, float]:
    """Budgets ``(r1, r2)`` where the best chord point leaves ``w0`` and reaches 0."""
    w0 = prob.w0
    ns = math.sqrt(float(prob.sigma.quad(w0)))
    nd = float(prob.attack.dual_norm(w0))
    if nd == 0.0:
        raise ZeroModel("w0 must be non-zero")
    r0 = ns / nd
    return C0 * r0, r0 / C0


def chord_optimum(prob: Problem) -> OptReport:
    """Best uniform shrinkage ``gamma * w0`` with ``gamma`` in ``[0, 1]``, in closed form."""
    w0 = prob.w0
    nd = float(prob.attack.dual_norm(w0))
    if nd == 0.0:
        raise ZeroModel("w0 must be non-zero")
    ns = math.sqrt(float(prob.sigma.quad(w0)))
    r = prob.r
    a = ns * ns + r * r * nd * nd - 2.0 * C0 * r * ns * nd
    b = ns * ns - C0 * r * ns * nd
    gamma = min(max(b / a, 0.0), 1.0)
    return OptReport(adversarial_risk(gamma * w0, prob).exact, gamma * w0, "chord", True)


def _report(w, prob: Problem, method: str, objective: str) -> OptReport:
    rep = adversarial_risk(w, prob)
    value = rep.exact if objective == "exact" else rep.proxy
    return OptReport(value, np.array(w, dtype=float), method, True)
