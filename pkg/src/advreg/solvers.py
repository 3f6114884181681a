"""Convex minimisation of the adversarial-risk proxy.

The square root of the proxy, ``||w - a||_S + r ||w||_*``, is minimised by a
Chambolle-Pock primal-dual iteration for any covariance and any attack whose
dual norm has a closed-form prox (``l1``, ``l2``, ``l_inf`` and Mahalanobis
after a change of variables). For diagonal covariances under ``l_inf``
attacks the minimiser lies on a one-parameter soft-thresholding path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .core import AttackNorm, SpdMatrix, as_vector
from .errors import (
    NonPositiveLambda,
    OrderingViolation,
    StepsizeViolation,
    UnsupportedNorm,
)

__all__ = [
    "soft_threshold",
    "project_l1_ball",
    "project_l2_ball",
    "project_linf_ball",
    "prox_dual_norm",
    "PdConfig",
    "PdState",
    "chambolle_pock",
    "StPath",
    "soft_threshold_path",
    "fit_gdplus_diag_M",
]


def soft_threshold(v, level):
    """Componentwise ``sign(v) * max(|v| - level, 0)``."""
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - level, 0.0)


def project_l1_ball(v, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x||_1 <= radius}`` (sort and threshold)."""
    v = as_vector(v)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u * idx > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_l2_ball(v, radius: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    return v.copy() if n <= radius else v * (radius / n)


def project_linf_ball(v, radius: float = 1.0) -> np.ndarray:
    return np.clip(np.asarray(v, dtype=float), -radius, radius)


def prox_dual_norm(v, scale: float, attack: AttackNorm) -> np.ndarray:
    """Prox of ``scale * ||.||_*`` for l_inf, l2 and l1 attacks.

    l_inf attacks give soft thresholding, l2 block shrinkage, and l1 attacks
    (dual ``l_inf``) the Moreau residual of the l1-ball projection.
    """
    v = as_vector(v)
    if not math.isfinite(scale) or scale < 0:
        raise ValueError("scale must be finite and non-negative")
    if attack.kind != "lp" or attack.p not in (1.0, 2.0, math.inf):
        raise UnsupportedNorm(f"no closed-form prox for {attack.label} attacks")
    if scale == 0:
        return v.copy()
    if math.isinf(attack.p):
        return soft_threshold(v, scale)
    if attack.p == 2.0:
        n = float(np.linalg.norm(v))
        return v * max(0.0, 1.0 - scale / n) if n > 0 else v.copy()
    return v - project_l1_ball(v, scale)


@dataclass(frozen=True)
class PdConfig:
    """Step sizes and stopping rule for :func:`chambolle_pock`.

    ``eta1``/``eta2`` default to ``0.95 / ||K||_op``. The run stops at
    ``max_iter`` or once the ergodic objective changes by less than
    ``tol`` (relative) over ``window`` iterations and agrees with the
    objective of the last iterate to the same tolerance.
    """

    eta1: Optional[float] = None
    eta2: Optional[float] = None
    max_iter: int = 20_000
    tol: float = 1e-12
    window: int = 50
    trace_path: Optional[str] = None


@dataclass(eq=False)
class PdState:
    w: np.ndarray
    z: np.ndarray
    u: np.ndarray
    iter: int
    objective_history: List[float] = field(default_factory=list)
    w_last: Optional[np.ndarray] = None
    dual_norm_history: List[float] = field(default_factory=list)


def _regulariser(attack: AttackNorm, sigma_hat: SpdMatrix):
    """Linear map ``K``, back-transform ``T`` (``w = T u``) and the prox norm."""
    K = sigma_hat.sqrt()
    if attack.kind == "mahalanobis":
        # u = B^{-1/2} w makes ||w||_{B^{-1}} = ||u||_2
        T = attack.B.sqrt()
        return K @ T, T, AttackNorm.l2()
    if attack.p not in (1.0, 2.0, math.inf):
        raise UnsupportedNorm(f"no closed-form prox for {attack.label} attacks")
    return K, None, attack


def chambolle_pock(
    w0_hat,
    sigma_hat: SpdMatrix,
    attack: AttackNorm,
    r: float,
    cfg: Optional[PdConfig] = None,
) -> Tuple[np.ndarray, PdState]:
    """Minimise ``||w - w0_hat||_S + r ||w||_*`` with a primal-dual iteration.

    Saddle form ``min_w max_{||z||_2 <= 1} z^T (K w - K w0_hat) + r ||w||_*``
    with ``K = S^{1/2}``. Each iteration projects the dual ascent step on the
    unit ball, takes a prox step on the primal, and extrapolates
    ``u = 2 w_new - w_old``. Returns the ergodic average of the primal
    iterates with weights proportional to the iteration count. This keeps
    the O(1/t) guarantee (with twice the constant of the uniform average)
    while damping the transient of the first iterates, which otherwise
    dominates the error as ``C / t``.
    """
    cfg = cfg or PdConfig()
    w0_hat = as_vector(w0_hat, sigma_hat.dim)
    K, T, prox_norm = _regulariser(attack, sigma_hat)
    if T is None and sigma_hat.is_diagonal:
        lam = sigma_hat.diagonal
        kd = np.sqrt(lam)
        apply_k = apply_kt = lambda v: kd * v  # noqa: E731
        quad = lambda v: float(np.sum(lam * v * v))  # noqa: E731
        knorm = float(kd.max())
    else:
        Kt = K.T
        apply_k = lambda v: K @ v  # noqa: E731
        apply_kt = lambda v: Kt @ v  # noqa: E731
        quad = lambda v: float(sigma_hat.quad(v))  # noqa: E731
        knorm = float(np.linalg.norm(K, 2))
    a = sigma_hat.sqrt() @ w0_hat
    eta1 = cfg.eta1 if cfg.eta1 is not None else 0.95 / knorm
    eta2 = cfg.eta2 if cfg.eta2 is not None else 0.95 / knorm
    if eta1 <= 0 or eta2 <= 0 or eta1 * eta2 * knorm ** 2 >= 1.0:
        raise StepsizeViolation("need eta1 * eta2 * ||K||_op^2 < 1")

    d = sigma_hat.dim
    w = np.zeros(d)
    z = np.zeros(d)
    u = np.zeros(d)
    avg = np.zeros(d)
    state = PdState(w, z, u, 0)

    def objective(v):
        x = v if T is None else T @ v
        diff = x - w0_hat
        return math.sqrt(max(quad(diff), 0.0)) + r * float(attack.dual_norm(x))

    writer = None
    fh = None
    if cfg.trace_path:
        fh = open(cfg.trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective", "dual_feasibility"])
    try:
        hist = state.objective_history
        for k in range(1, cfg.max_iter + 1):
            z = z + eta2 * (apply_k(u) - a)
            nz = float(np.linalg.norm(z))
            if nz > 1.0:
                z = z / nz
                nz = 1.0
            w_new = prox_dual_norm(w - eta1 * apply_kt(z), eta1 * r, prox_norm)
            u = 2.0 * w_new - w
            w = w_new
            avg += (2.0 / (k + 1)) * (w - avg)
            obj = objective(avg)
            hist.append(obj)
            state.dual_norm_history.append(nz)
            if writer is not None:
                writer.writerow([k, repr(obj), repr(nz)])
            state.iter = k
            if k > cfg.window:
                prev = hist[-1 - cfg.window]
                scale = cfg.tol * max(obj, 1e-300)
                if abs(prev - obj) <= scale and abs(objective(w) - obj) <= scale:
                    break
    finally:
        if fh is not None:
            fh.close()

    out = avg if T is None else T @ avg
    state.w = out
    state.z = z
    state.u = u if T is None else T @ u
    state.w_last = w if T is None else T @ w
    return out, state


@dataclass(frozen=True, eq=False)
class StPath:
    """Soft-thresholding path ``w(t)_j = ST(w0_j; r t / lambda_j)``.

    ``c = max_j |w0_j| lambda_j``; the grid spans ``[0, t_max]`` with
    ``t_max = min(||w0||_S, c / r)``, which contains every minimiser.
    """

    c: float
    t_max: float
    grid: np.ndarray
    values: np.ndarray
    best_t: float
    best_w: np.ndarray
    best_value: float


def _st_point(w0, lam, r, t):
    return soft_threshold(w0, r * t / lam)


def soft_threshold_path(w0_hat, lam, r: float, grid_size: int = 200) -> StPath:
    """Stage-2 solver for diagonal covariance ``diag(lam)`` under l_inf attacks.

    Evaluates the proxy on ``grid_size`` equispaced path points, keeps the
    smallest ``t`` among equal minima, then refines the winning bracket with
    a bounded line search.
    """
    w0 = as_vector(w0_hat)
    lam = as_vector(lam, w0.size)
    if np.any(lam <= 0):
        raise NonPositiveLambda("diagonal covariance entries must be positive")
    if grid_size < 100:
        raise ValueError("grid_size must be at least 100")

    def proxy(w):
        diff = w - w0
        return (math.sqrt(float(np.sum(lam * diff * diff))) + r * float(np.sum(np.abs(w)))) ** 2

    c = float(np.max(np.abs(w0) * lam))
    norm_s = math.sqrt(float(np.sum(lam * w0 * w0)))
    t_max = 0.0 if r == 0 else min(norm_s, c / r)
    grid = np.linspace(0.0, t_max, grid_size)
    values = np.array([proxy(_st_point(w0, lam, r, t)) for t in grid])
    k = int(np.argmin(values))
    best_t, best_v = float(grid[k]), float(values[k])
    if t_max > 0:
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid_size - 1)]
        res = minimize_scalar(
            lambda t: proxy(_st_point(w0, lam, r, t)),
            bounds=(lo, hi), method="bounded", options={"xatol": 1e-14 * t_max},
        )
        if res.fun < best_v:
            best_t, best_v = float(res.x), float(res.fun)
    best_w = _st_point(w0, lam, r, best_t)
    return StPath(c, t_max, grid, values, best_t, best_w, proxy(best_w))


def fit_gdplus_diag_M(w0, w_opt, sigma: SpdMatrix, t: float = 1.0, tol: float = 1e-9) -> np.ndarray:
    """Diagonal ``M`` whose GD+ trajectory passes through ``w_opt`` at time ``t``.

    With diagonal ``S`` and ``M``, GD+ reduces to ``(I - exp(-t D)) w0`` where
    ``D = M^2 S``; solving coordinatewise for ``D`` and setting
    ``M = (D S^{-1})^{1/2}`` reproduces ``w_opt``. Boundary coordinates
    (``w_opt`` equal to 0 or to ``w0``) use the clamped rates ``1e-6`` and
    ``1e6``.
    """
    if not sigma.is_diagonal:
        raise ValueError("covariance must be diagonal")
    if t <= 0:
        raise ValueError("t must be positive")
    w0 = as_vector(w0, sigma.dim)
    w_opt = as_vector(w_opt, sigma.dim)
    a0, a1 = np.abs(w0), np.abs(w_opt)
    slack = tol * max(1.0, float(np.max(a0)))
    if np.any(a1 > a0 + slack) or np.any(w0 * w_opt < -slack * slack):
        raise OrderingViolation("w_opt must shrink w0 componentwise with matching signs")
    frac = np.divide(np.minimum(a1, a0), a0, out=np.ones_like(a0), where=a0 > 0)
    with np.errstate(divide="ignore"):
        rates = -np.log1p(-frac) / t
    rates = np.clip(rates, 1e-6, 1e6)
    rates[a0 == 0] = 1.0
    return np.diag(np.sqrt(rates / sigma.diagonal))
