"""Gradient-flow trajectories (GD and feature-rescaled GD+) and early stopping.

Only the continuous-time flows are modelled. Plain GD on the population
squared loss started at zero follows ``w(t) = (I - exp(-t S)) w0``. GD+ runs
the same flow on features transformed by an invertible ``M`` and, mapped
back to the original coordinates, gives
``M^T (I - exp(-t M S M^T)) M^{-T} w0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .core import AttackNorm, SpdMatrix, as_vector, matrix_exp_scaled, spd_from_dense
from .errors import EmptyGrid, InvalidSubgradient, NotPerfectSquare, SingularTransform
from .risk import Problem, adversarial_risk

__all__ = [
    "GdPlusConfig",
    "TrajectoryResult",
    "gd_point",
    "gdplus_point",
    "default_t_grid",
    "early_stop",
    "mahalanobis_counterexample",
    "BangBangInstance",
    "bangbang_instance",
    "canonical_subgradient",
    "sufficient_condition_check",
]


@dataclass(frozen=True, eq=False)
class GdPlusConfig:
    """Data transformation ``M`` for GD+ and an optional time grid."""

    M: np.ndarray
    t_grid: Optional[Sequence[float]] = None

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise SingularTransform(f"M must be square, got shape {M.shape}")
        s = np.linalg.svd(M, compute_uv=False)
        if s[-1] == 0.0 or s[0] / s[-1] > 1e12:
            raise SingularTransform("M is not numerically invertible")
        M.setflags(write=False)
        object.__setattr__(self, "M", M)
        if self.t_grid is not None:
            g = np.asarray(self.t_grid, dtype=float)
            if g.size and np.any(np.diff(g) <= 0):
                raise ValueError("t_grid must be strictly increasing")


@dataclass(frozen=True, eq=False)
class TrajectoryResult:
    """Early-stopping outcome; ``t_opt = math.inf`` means the limit point won.

    ``curve`` rows are ``(t, exact, proxy, standard)`` risks on the grid.
    """

    t_opt: float
    w_opt: np.ndarray
    risk_opt: float
    curve: List[Tuple[float, float, float, float]] = field(default_factory=list)


def _flow(S: SpdMatrix, v: np.ndarray, t: float) -> np.ndarray:
    if math.isinf(t):
        return v.copy()
    if t == 0.0:
        return np.zeros_like(v)
    return v - matrix_exp_scaled(S, t) @ v


def gd_point(prob: Problem, t: float) -> np.ndarray:
    """GD flow ``(I - exp(-t S)) w0``; ``t = inf`` returns ``w0``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return _flow(prob.sigma, np.array(prob.w0), t)


class _GdPlusFlow:
    def __init__(self, prob: Problem, cfg: GdPlusConfig):
        M = cfg.M
        if M.shape[0] != prob.dim:
            raise SingularTransform("M and problem dimensions differ")
        S = M @ prob.sigma.entries @ M.T
        self.S = spd_from_dense(0.5 * (S + S.T))
        self.M = M
        self.v = np.linalg.solve(M.T, prob.w0)

    def point(self, t: float) -> np.ndarray:
        return self.M.T @ _flow(self.S, self.v, t)


def gdplus_point(prob: Problem, cfg: GdPlusConfig, t: float) -> np.ndarray:
    """GD+ iterate at time ``t`` expressed in the original feature coordinates."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return _GdPlusFlow(prob, cfg).point(t)


def default_t_grid(S: SpdMatrix, points: int = 200) -> np.ndarray:
    """``0`` plus a log grid over ``[1e-4 / lambda_max, 1e2 / lambda_min]``."""
    lo = 1e-4 / S.lambda_max
    hi = 1e2 / S.lambda_min
    return np.concatenate([[0.0], np.geomspace(lo, hi, points)])


def early_stop(
    prob: Problem,
    method: Union[str, GdPlusConfig] = "gd",
    t_grid: Optional[Sequence[float]] = None,
) -> TrajectoryResult:
    """Best stopping time along a GD (``method="gd"``) or GD+ trajectory.

    The exact adversarial risk is evaluated at every grid time and at the
    ``t -> inf`` limit; the winning bracket is then refined with a bounded
    line search. Risk curves need not be unimodal, so only the best bracket
    is refined.
    """
    if isinstance(method, GdPlusConfig):
        flow = _GdPlusFlow(prob, method)
        point, S = flow.point, flow.S
        if t_grid is None:
            t_grid = method.t_grid
    elif method == "gd":
        S = prob.sigma
        point = lambda t: gd_point(prob, t)  # noqa: E731
    else:
        raise ValueError(f"unknown method {method!r}")

    if t_grid is None:
        grid = default_t_grid(S)
    else:
        grid = np.asarray(t_grid, dtype=float)
        if grid.size == 0:
            raise EmptyGrid("t_grid is empty")
        if np.any(grid < 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("t_grid must be non-negative and strictly increasing")
        if grid[0] != 0.0:
            grid = np.concatenate([[0.0], grid])

    curve = []
    for t in grid:
        rep = adversarial_risk(point(float(t)), prob)
        curve.append((float(t), rep.exact, rep.proxy, rep.standard))
    exact = np.array([c[1] for c in curve])
    k = int(np.argmin(exact))
    t_best, r_best = float(grid[k]), float(exact[k])

    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid.size - 1)]
    if hi > lo:
        res = minimize_scalar(
            lambda t: adversarial_risk(point(t), prob).exact,
            bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-12 * max(hi, 1e-300)},
        )
        if res.fun < r_best:
            t_best, r_best = float(res.x), float(res.fun)

    # ties within rounding go to the endpoints t = 0 and t = inf
    limit = adversarial_risk(point(math.inf), prob).exact
    slack = 1e-12 * max(r_best, 1e-300)
    if limit <= r_best + slack:
        return TrajectoryResult(math.inf, point(math.inf), limit, curve)
    if exact[0] <= r_best + slack:
        return TrajectoryResult(0.0, point(0.0), float(exact[0]), curve)
    return TrajectoryResult(t_best, point(t_best), r_best, curve)


def mahalanobis_counterexample(m: int, r: float = 1.0) -> Tuple[Problem, GdPlusConfig]:
    """Two-dimensional instance where GD is arbitrarily worse than optimal.

    ``Sigma = I``, attack ``||.||_B`` with ``B = diag(1/m, m)`` and
    ``w0 = (1/sqrt(m), 1)``; GD+ uses ``M = B^{1/2}``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    B = SpdMatrix.diag([1.0 / m, float(m)])
    w0 = np.array([1.0 / math.sqrt(m), 1.0])
    prob = Problem(w0, SpdMatrix.identity(2), AttackNorm.mahalanobis(B), float(r))
    return prob, GdPlusConfig(B.sqrt())


@dataclass(frozen=True, eq=False)
class BangBangInstance:
    """Instance on which uniform shrinkage fails under l_inf attacks.

    ``shrinkage_optimum`` is ``min(||w0||_2^2, r^2 ||w0||_1^2)`` and
    ``competitor_bound`` the proxy value ``(||w - w0||_2 + r ||w||_1)^2`` of the
    sparse competitor ``w`` (ones on the large coordinates).
    """

    problem: Problem
    competitor: np.ndarray
    competitor_bound: float
    shrinkage_optimum: float

    @property
    def ratio(self) -> float:
        return self.shrinkage_optimum / self.competitor_bound


def bangbang_instance(d: int) -> BangBangInstance:
    """``sqrt(d)`` coordinates equal ``1 + lam``, the rest ``lam``; ``r = lam = 1/(d^{1/4} log d)``."""
    k = math.isqrt(d)
    if d < 16 or k * k != d:
        raise NotPerfectSquare("d must be a perfect square >= 16")
    lam = 1.0 / (d ** 0.25 * math.log(d))
    w0 = np.full(d, lam)
    w0[:k] += 1.0
    prob = Problem(w0, SpdMatrix.identity(d), AttackNorm.linf(), lam)
    competitor = np.zeros(d)
    competitor[:k] = 1.0
    bound = (math.sqrt(d) * lam + lam * k) ** 2
    shrink = min(float(w0 @ w0), lam * lam * float(np.sum(np.abs(w0))) ** 2)
    return BangBangInstance(prob, competitor, bound, shrink)


def canonical_subgradient(w0, attack: AttackNorm) -> np.ndarray:
    """A subgradient of the dual norm at ``w0`` (zero at ``w0 = 0``)."""
    w0 = as_vector(w0)
    if not np.any(w0):
        return np.zeros_like(w0)
    if attack.kind == "mahalanobis":
        g = attack.B.inverse() @ w0
        return g / float(attack.dual_norm(w0))
    q = attack.q
    if q == 1.0:
        return np.sign(w0)
    if math.isinf(q):
        k = int(np.argmax(np.abs(w0)))
        g = np.zeros_like(w0)
        g[k] = np.sign(w0[k])
        return g
    a = np.abs(w0)
    return np.sign(w0) * (a / float(attack.dual_norm(w0))) ** (q - 1.0)


def sufficient_condition_check(prob: Problem, subgradient=None, tol: float = 1e-8) -> float:
    """Ratio ``||g|| ||w0||_* / (||g||_{S^{-1}} ||w0||_S)`` for a dual-norm subgradient ``g``.

    Values bounded below by a constant ``c`` certify that the best uniform
    shrinkage of ``w0`` is within ``max(1, 1/c^2) * ALPHA`` of optimal.
    """
    w0 = prob.w0
    g = canonical_subgradient(w0, prob.attack) if subgradient is None else as_vector(subgradient, prob.dim)
    gn = float(prob.attack.norm(g))
    wd = float(prob.attack.dual_norm(w0))
    if gn > 1.0 + tol or abs(float(g @ w0) - wd) > tol * max(1.0, wd):
        raise InvalidSubgradient("g is not a subgradient of the dual norm at w0")
    denom = math.sqrt(float(prob.sigma.inv_quad(g))) * math.sqrt(float(prob.sigma.quad(w0)))
    if denom == 0.0:
        raise InvalidSubgradient("degenerate subgradient or zero model")
    return gn * wd / denom
