"""Finite-sample pipeline: synthetic data, Stage-1 estimates and the two-stage fit.

Stage 1 estimates the generative model and the feature covariance from
``(X, y)``. Stage 2 minimises the adversarial-risk proxy built on those
estimates, either with the primal-dual solver (any covariance) or with the
soft-thresholding path (diagonal covariance, ``l_inf`` attacks).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .core import AttackNorm, SpdMatrix, as_vector, spd_from_dense
from .errors import (
    DimensionMismatch,
    NoOracle,
    NotPositiveDefinite,
    RankDeficient,
    WrongNorm,
)
from .risk import OptReport, Problem, adversarial_risk, optimal_risk_grid, optimal_risk_ridge_path
from .solvers import PdConfig, chambolle_pock, soft_threshold_path

__all__ = [
    "DatasetMeta",
    "Dataset",
    "Stage1Result",
    "TwoStageResult",
    "AuditResult",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "empirical_covariance",
    "lasso_cd",
    "fit_stage1",
    "two_stage_fit",
    "proxy_optimum",
    "consistency_audit",
    "calibrate_constant",
    "sparse_instance",
]


@dataclass(frozen=True, eq=False)
class DatasetMeta:
    true_w0: np.ndarray
    true_sigma: SpdMatrix
    sigma_eps: float
    seed: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features ``X`` (n x d), responses ``y`` and, for synthetic data, the truth."""

    X: np.ndarray
    y: np.ndarray
    meta: Optional[DatasetMeta] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DimensionMismatch(f"X {X.shape} and y {y.shape} do not match")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class Stage1Result:
    """Estimates of ``(w0, Sigma)``; ``e1``/``e2`` are ``None`` without ground truth."""

    w0_hat: np.ndarray
    sigma_hat: SpdMatrix
    e1: Optional[float] = None
    e2: Optional[float] = None
    method: str = ""


@dataclass(frozen=True, eq=False)
class TwoStageResult:
    w_hat: np.ndarray
    stage1: Stage1Result
    stage2_method: str
    proxy_at_w_hat: float
    excess_bound: Optional[float] = None
    true_risk: Optional[float] = None


@dataclass(frozen=True)
class AuditResult:
    excess: float
    bound: float
    holds: bool


def generate_dataset(w0, sigma: SpdMatrix, n: int, sigma_eps: float = 0.0, seed: int = 0) -> Dataset:
    """Draw ``n`` rows ``x ~ N(0, Sigma)`` and ``y = x^T w0 + eps``.

    Features are standard normals multiplied by ``Sigma^{1/2}``; the noise is
    drawn after the features from the same generator.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if sigma_eps < 0:
        raise ValueError("sigma_eps must be non-negative")
    w0 = as_vector(w0, sigma.dim)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, sigma.dim)) @ sigma.sqrt()
    eps = rng.standard_normal(n)
    y = X @ w0 + sigma_eps * eps
    return Dataset(X, y, DatasetMeta(w0.copy(), sigma, float(sigma_eps), int(seed)))


def sparse_instance(d: int = 200, s: int = 10, seed: int = 0):
    """Exponential diagonal covariance (mean 1) and an ``s``-sparse Gaussian ``w0``.

    ``w0`` is normalised so that ``||w0||_Sigma = 1``.
    """
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    rng = np.random.default_rng(seed)
    lam = rng.exponential(1.0, d)
    w0 = np.zeros(d)
    support = rng.choice(d, size=s, replace=False)
    w0[support] = rng.standard_normal(s)
    w0 /= math.sqrt(float(np.sum(lam * w0 * w0)))
    return w0, SpdMatrix.diag(lam)


# -- serialisation ---------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def save_dataset(data: Dataset, path) -> None:
    """CSV with header ``x_1,...,x_d,y`` plus a ``key=value`` sidecar for the truth."""
    path = Path(path)
    header = ",".join([f"x_{j + 1}" for j in range(data.dim)] + ["y"])
    np.savetxt(path, np.column_stack([data.X, data.y]), delimiter=",",
               header=header, comments="", fmt="%.17g")
    if data.meta is None:
        return
    m = data.meta
    lines = [
        f"seed={m.seed}",
        f"d={data.dim}",
        f"n={data.n}",
        f"sigma_eps={m.sigma_eps!r}",
        "w0=" + " ".join(repr(float(v)) for v in m.true_w0),
    ]
    if m.true_sigma.is_diagonal:
        lines.append("sigma_diag=" + " ".join(repr(float(v)) for v in m.true_sigma.diagonal))
    else:
        tril = m.true_sigma.entries[np.tril_indices(data.dim)]
        lines.append("sigma_tril=" + " ".join(repr(float(v)) for v in tril))
    _sidecar(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    X, y = arr[:, :-1], arr[:, -1]
    side = _sidecar(path)
    if not side.exists():
        return Dataset(X, y)
    kv = {}
    for line in side.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    d = int(kv["d"])
    w0 = np.array([float(v) for v in kv["w0"].split()])
    if "sigma_diag" in kv:
        sigma = SpdMatrix.diag([float(v) for v in kv["sigma_diag"].split()])
    else:
        S = np.zeros((d, d))
        S[np.tril_indices(d)] = [float(v) for v in kv["sigma_tril"].split()]
        sigma = spd_from_dense(S + np.tril(S, -1).T)
    return Dataset(X, y, DatasetMeta(w0, sigma, float(kv["sigma_eps"]), int(kv["seed"])))


# -- Stage 1 ---------------------------------------------------------------

def _jittered(S: np.ndarray) -> SpdMatrix:
    try:
        return spd_from_dense(S)
    except NotPositiveDefinite:
        d = S.shape[0]
        return spd_from_dense(S + 1e-10 * np.trace(S) * np.eye(d))


def empirical_covariance(X, mode: str = "raw", eps: Optional[float] = None) -> SpdMatrix:
    """``X^T X / n`` with optional regularisation.

    ``raw`` adds a ``1e-10 * trace`` jitter only when needed and refuses
    ``n < d``; ``ridge`` adds ``eps * I`` (default ``1e-3 * trace / d``);
    ``diagonal`` keeps only the diagonal.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-D array")
    n, d = X.shape
    if mode == "diagonal":
        diag = np.mean(X * X, axis=0)
        floor = 1e-10 * max(float(diag.sum()), 1e-300)
        return SpdMatrix.diag(np.maximum(diag, floor))
    S = X.T @ X / n
    S = 0.5 * (S + S.T)
    if mode == "raw":
        if n < d:
            raise RankDeficient(f"raw covariance is singular for n={n} < d={d}")
        return _jittered(S)
    if mode == "ridge":
        if eps is None:
            eps = 1e-3 * float(np.trace(S)) / d
        if eps <= 0:
            raise ValueError("eps must be positive")
        return spd_from_dense(S + eps * np.eye(d))
    raise ValueError(f"unknown covariance mode {mode!r}")


def _ridge_solve(G: np.ndarray, c: np.ndarray, lams: Sequence[float]) -> np.ndarray:
    """Rows ``(G + lam I)^{-1} c`` for every ``lam``, from one eigendecomposition."""
    vals, vecs = np.linalg.eigh(G)
    proj = vecs.T @ c
    return np.array([vecs @ (proj / (vals + lam)) for lam in lams])


def _ridge_cv(X, y, folds: int = 5, grid_size: int = 30) -> np.ndarray:
    n, d = X.shape
    scale = float(np.trace(X.T @ X)) / (n * d)
    lams = scale * np.logspace(-4, 2, grid_size)
    edges = np.linspace(0, n, folds + 1).astype(int)
    err = np.zeros(grid_size)
    for k in range(folds):
        test = np.zeros(n, dtype=bool)
        test[edges[k]:edges[k + 1]] = True
        Xt, yt = X[~test], y[~test]
        m = Xt.shape[0]
        W = _ridge_solve(Xt.T @ Xt / m, Xt.T @ yt / m, lams)
        resid = X[test] @ W.T - y[test][:, None]
        err += np.sum(resid * resid, axis=0)
    best = lams[int(np.argmin(err))]
    return _ridge_solve(X.T @ X / n, X.T @ y / n, [best])[0]


def lasso_cd(G, c, lam: float, w=None, tol: float = 1e-10, max_sweeps: int = 10_000) -> np.ndarray:
    """Coordinate descent for ``w^T G w / 2 - c^T w + lam ||w||_1``.

    Works on the covariance form ``G = X^T X / n``, ``c = X^T y / n`` and
    keeps the gradient ``c - G w`` up to date after each coordinate move.
    """
    G = np.asarray(G, dtype=float)
    c = np.asarray(c, dtype=float)
    d = c.size
    w = np.zeros(d) if w is None else np.array(w, dtype=float)
    resid = c - G @ w
    diag = np.diag(G).copy()
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(d):
            if diag[j] <= 0:
                continue
            old = w[j]
            rho = resid[j] + diag[j] * old
            new = math.copysign(max(abs(rho) - lam, 0.0), rho) / diag[j]
            if new != old:
                resid -= G[:, j] * (new - old)
                w[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest <= tol * max(1.0, float(np.max(np.abs(w)))):
            break
    return w


def _scaled_lasso(X, y, s_hint: int, A: float = 2.0, max_outer: int = 20, tol: float = 1e-8) -> np.ndarray:
    n, d = X.shape
    G = X.T @ X / n
    c = X.T @ y / n
    level = A * math.sqrt(math.log(2.0 * d / max(s_hint, 1)) / n)
    sig = float(np.linalg.norm(y)) / math.sqrt(n)
    w = np.zeros(d)
    for _ in range(max_outer):
        w = lasso_cd(G, c, sig * level, w)
        new = float(np.linalg.norm(y - X @ w)) / math.sqrt(n)
        if new == 0.0 or abs(new - sig) <= tol * sig:
            sig = new
            break
        sig = new
    return w


def _errors(w0_hat, sigma_hat: SpdMatrix, meta: Optional[DatasetMeta]):
    if meta is None:
        return None, None
    e1 = float(np.linalg.norm(w0_hat - meta.true_w0))
    e2 = float(np.linalg.norm(sigma_hat.entries - meta.true_sigma.entries, 2))
    return e1, e2


def fit_stage1(
    data: Dataset,
    method: str = "sqrt_lasso",
    s_hint: Optional[int] = None,
    A: float = 2.0,
    cov_mode: Optional[str] = None,
    known_sigma: Union[bool, SpdMatrix] = False,
) -> Stage1Result:
    """Estimate ``(w0, Sigma)`` with ``ols``, ``ridge_cv`` or ``sqrt_lasso``.

    ``ols`` solves the normal equations and needs ``n >= d``. ``ridge_cv``
    picks the penalty by 5-fold cross-validation over 30 log-spaced values.
    ``sqrt_lasso`` alternates a lasso at level
    ``sigma * A * sqrt(log(2d / s) / n)`` with the noise estimate
    ``sigma = ||y - X w|| / sqrt(n)``.

    ``cov_mode`` is passed to :func:`empirical_covariance` (default ``raw``
    when ``n >= d`` and ``ridge`` otherwise). ``known_sigma=True`` uses the
    true covariance from the metadata, or pass an :class:`SpdMatrix`.
    """
    X, y = data.X, data.y
    n, d = X.shape
    if method == "ols":
        if n < d:
            raise RankDeficient(f"ols needs n >= d, got n={n}, d={d}")
        G = X.T @ X / n
        rhs = X.T @ y / n
        try:
            w0_hat = linalg.solve(G, rhs, assume_a="pos")
        except linalg.LinAlgError:
            w0_hat = linalg.solve(G + 1e-10 * np.trace(G) * np.eye(d), rhs, assume_a="pos")
    elif method == "ridge_cv":
        w0_hat = _ridge_cv(X, y)
    elif method == "sqrt_lasso":
        w0_hat = _scaled_lasso(X, y, s_hint if s_hint is not None else max(1, d // 20), A)
    else:
        raise ValueError(f"unknown stage-1 method {method!r}")

    if isinstance(known_sigma, SpdMatrix):
        sigma_hat = known_sigma
    elif known_sigma:
        if data.meta is None:
            raise ValueError("known_sigma=True needs dataset metadata")
        sigma_hat = data.meta.true_sigma
    else:
        mode = cov_mode or ("raw" if n >= d else "ridge")
        sigma_hat = empirical_covariance(X, mode)
    e1, e2 = _errors(w0_hat, sigma_hat, data.meta)
    return Stage1Result(np.asarray(w0_hat, dtype=float), sigma_hat, e1, e2, method)


# -- Stage 2 ---------------------------------------------------------------

def _proxy(w, w0, sigma: SpdMatrix, attack: AttackNorm, r: float) -> float:
    bias = math.sqrt(max(float(sigma.quad(w - w0)), 0.0))
    return (bias + r * float(attack.dual_norm(w))) ** 2


def two_stage_fit(
    data: Dataset,
    attack: AttackNorm,
    r: float,
    stage1: Union[str, Stage1Result] = "sqrt_lasso",
    stage2: str = "primal_dual",
    pd_config: Optional[PdConfig] = None,
    **stage1_kwargs,
) -> TwoStageResult:
    """Estimate ``(w0, Sigma)`` then minimise the proxy built on the estimates.

    ``stage1`` is a method name for :func:`fit_stage1` or a precomputed
    :class:`Stage1Result`. ``stage2`` is ``primal_dual`` or
    ``soft_threshold`` (diagonal estimate and ``l_inf`` attack only; the
    covariance estimate then defaults to its diagonal). With ground truth
    available the result also carries the true adversarial risk of the fit
    and the bound ``max(||S_hat||_op^2, ||w0_hat||_{S_hat}^2) (e1^2 + e2^2)``.
    """
    if r < 0 or not math.isfinite(r):
        raise ValueError("r must be finite and non-negative")
    if stage2 not in ("primal_dual", "soft_threshold"):
        raise ValueError(f"unknown stage-2 method {stage2!r}")
    if stage2 == "soft_threshold" and not (attack.kind == "lp" and math.isinf(attack.p)):
        raise WrongNorm("soft_threshold stage 2 needs an l_inf attack")
    if isinstance(stage1, Stage1Result):
        s1 = stage1
    else:
        if stage2 == "soft_threshold":
            stage1_kwargs.setdefault("cov_mode", "diagonal")
        s1 = fit_stage1(data, stage1, **stage1_kwargs)
    w0_hat, sigma_hat = s1.w0_hat, s1.sigma_hat

    if r == 0:
        w_hat = w0_hat.copy()
    elif stage2 == "soft_threshold":
        if not sigma_hat.is_diagonal:
            raise ValueError("soft_threshold stage 2 needs a diagonal covariance estimate")
        w_hat = soft_threshold_path(w0_hat, sigma_hat.diagonal, r).best_w
    else:
        w_hat, _ = chambolle_pock(w0_hat, sigma_hat, attack, r, pd_config)

    proxy = _proxy(w_hat, w0_hat, sigma_hat, attack, r)
    bound = true_risk = None
    if s1.e1 is not None:
        a = max(sigma_hat.op_norm ** 2, float(sigma_hat.quad(w0_hat)))
        bound = a * (s1.e1 ** 2 + s1.e2 ** 2)
    if data.meta is not None:
        truth = Problem(data.meta.true_w0, data.meta.true_sigma, attack, r)
        true_risk = adversarial_risk(w_hat, truth).exact
    return TwoStageResult(w_hat, s1, stage2, proxy, bound, true_risk)


# -- consistency diagnostics -----------------------------------------------

def proxy_optimum(prob: Problem) -> OptReport:
    """Optimal proxy risk on the true parameters, when an oracle exists.

    Uses the grid oracle for ``d <= 3``, the ridge path for Euclidean
    attacks, and the soft-thresholding path for diagonal covariance under
    ``l_inf`` attacks.
    """
    if prob.dim <= 3:
        return optimal_risk_grid(prob, objective="proxy")
    if prob.attack.is_euclidean:
        return optimal_risk_ridge_path(prob, objective="proxy")
    if prob.sigma.is_diagonal and prob.attack.kind == "lp" and math.isinf(prob.attack.p):
        if prob.r == 0:
            w = np.array(prob.w0)
        else:
            w = soft_threshold_path(prob.w0, prob.sigma.diagonal, prob.r).best_w
        return OptReport(adversarial_risk(w, prob).proxy, w, "soft_threshold", True)
    raise NoOracle(f"no proxy oracle for d={prob.dim} under {prob.attack.label} attacks")


def consistency_audit(
    result: TwoStageResult,
    prob: Problem,
    constant: float,
    optimum: Optional[float] = None,
    tol: float = 1e-6,
) -> AuditResult:
    """Excess proxy risk of a two-stage fit against ``constant * (e1^2 + e2^2)``.

    ``optimum`` may carry a precomputed optimal proxy value for ``prob``.
    The check allows ``tol * optimum`` of solver error on top of the bound.
    """
    s1 = result.stage1
    if s1.e1 is None:
        raise ValueError("audit needs ground-truth errors e1 and e2")
    if optimum is None:
        optimum = proxy_optimum(prob).value
    excess = adversarial_risk(result.w_hat, prob).proxy - optimum
    bound = constant * (s1.e1 ** 2 + s1.e2 ** 2)
    return AuditResult(excess, bound, excess <= bound + tol * optimum)


def calibrate_constant(results: Sequence[TwoStageResult], probs: Sequence[Problem]) -> float:
    """Largest observed ``excess / (e1^2 + e2^2)`` over a calibration batch."""
    if len(results) != len(probs) or not results:
        raise ValueError("need matching, non-empty results and problems")
    worst = 0.0
    for res, prob in zip(results, probs):
        err = res.stage1.e1 ** 2 + res.stage1.e2 ** 2
        excess = consistency_audit(res, prob, 0.0).excess
        if err > 0:
            worst = max(worst, excess / err)
    return worst
