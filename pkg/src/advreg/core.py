"""Dense linear algebra, attack norms and norm-dependent condition numbers.

Everything here works on small dense problems (``d`` up to a few hundred).
Vectors are plain 1-D ``numpy`` float arrays; matrices that must be
symmetric positive definite are wrapped in :class:`SpdMatrix`, which carries
its eigendecomposition so that square roots, inverses and matrix
exponentials are all cheap spectral maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    NotPositiveDefinite,
    NotSymmetric,
    Singular,
    WrongNorm,
)

__all__ = [
    "SpdMatrix",
    "AttackNorm",
    "ConditionReport",
    "as_vector",
    "jacobi_eigh",
    "spd_from_dense",
    "matrix_exp_scaled",
    "norm",
    "dual_norm",
    "mahalanobis",
    "condition_number",
]

SYM_RTOL = 1e-12
PD_RTOL = 1e-14


def as_vector(v, dim: Optional[int] = None) -> np.ndarray:
    """Coerce ``v`` to a finite 1-D float array, optionally checking its length."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"expected length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def jacobi_eigh(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigensolver for a real symmetric matrix.

    Sweeps over all pairs ``(p, q)`` with ``p < q`` and annihilates ``S[p, q]``
    with a plane rotation, until the off-diagonal Frobenius mass drops below
    ``tol * ||S||_F``.

    Returns
    -------
    eigvals : ndarray, sorted in descending order
    eigvecs : ndarray, orthonormal columns matching ``eigvals``
    sweeps : int
    """
    A = np.array(S, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V, 0
    sweeps = 0
    while sweeps < max_sweeps:
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off < tol * scale:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = A[:, p].copy()
                col_q = A[:, q]
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :]
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    evals = np.diag(A).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], V[:, order], sweeps


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """Symmetric positive-definite matrix with a cached eigendecomposition.

    ``eigvals`` are sorted in decreasing order and ``eigvecs`` holds the
    matching orthonormal eigenvectors as columns. Instances are immutable;
    build them with :func:`spd_from_dense`, :meth:`diag` or :meth:`identity`.
    """

    entries: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    _diagonal: bool = field(default=False, repr=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(self.eigvals[0])

    @property
    def lambda_min(self) -> float:
        return float(self.eigvals[-1])

    @property
    def op_norm(self) -> float:
        return self.lambda_max

    @property
    def is_diagonal(self) -> bool:
        return self._diagonal

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.entries).copy()

    def power(self, p: float) -> np.ndarray:
        """``S**p`` as a dense symmetric matrix (spectral calculus)."""
        if self._diagonal:
            return np.diag(np.diag(self.entries) ** p)
        V = self.eigvecs
        return (V * self.eigvals ** p) @ V.T

    def sqrt(self) -> np.ndarray:
        return self.power(0.5)

    def inv_sqrt(self) -> np.ndarray:
        return self.power(-0.5)

    def inverse(self) -> np.ndarray:
        return self.power(-1.0)

    def quad(self, v) -> np.ndarray:
        """Quadratic form ``v^T S v`` along the last axis of ``v``."""
        v = np.asarray(v, dtype=float)
        return np.einsum("...i,ij,...j->...", v, self.entries, v)

    def inv_quad(self, v) -> np.ndarray:
        """``v^T S^{-1} v`` along the last axis, computed in the eigenbasis."""
        v = np.asarray(v, dtype=float)
        coords = v @ self.eigvecs
        return np.sum(coords * coords / self.eigvals, axis=-1)

    @classmethod
    def diag(cls, values) -> "SpdMatrix":
        values = np.asarray(values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise DimensionMismatch("diagonal must be a non-empty 1-D array")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise NotPositiveDefinite("diagonal entries must be finite and positive")
        order = np.argsort(-values, kind="stable")
        vecs = np.eye(values.size)[:, order]
        evals = values[order]
        if evals[-1] <= PD_RTOL * evals[0]:
            raise NotPositiveDefinite("diagonal is numerically singular")
        return cls(_readonly(np.diag(values)), _readonly(evals), _readonly(vecs), True)

    @classmethod
    def identity(cls, d: int) -> "SpdMatrix":
        return cls.diag(np.ones(d))


def spd_from_dense(entries, method: str = "lapack") -> SpdMatrix:
    """Validate a dense symmetric matrix and eigendecompose it.

    ``method`` selects the eigensolver: ``"lapack"`` (``numpy.linalg.eigh``)
    or ``"jacobi"`` (:func:`jacobi_eigh`). Diagonal inputs skip both.
    """
    S = np.array(entries, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] == 0:
        raise DimensionMismatch(f"expected a non-empty square matrix, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError("matrix has non-finite entries")
    scale = max(np.max(np.abs(S)), np.finfo(float).tiny)
    if np.max(np.abs(S - S.T)) > SYM_RTOL * scale:
        raise NotSymmetric("matrix is not symmetric within relative tolerance 1e-12")
    S = 0.5 * (S + S.T)
    if np.count_nonzero(S - np.diag(np.diag(S))) == 0:
        d = np.diag(S)
        if np.any(d <= 0):
            raise NotPositiveDefinite("matrix has a non-positive eigenvalue")
        return SpdMatrix.diag(d)
    if method == "lapack":
        evals, evecs = np.linalg.eigh(S)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    elif method == "jacobi":
        evals, evecs, _ = jacobi_eigh(S)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    if evals[0] <= 0 or evals[-1] <= PD_RTOL * evals[0]:
        raise NotPositiveDefinite(
            f"smallest eigenvalue {evals[-1]:.3e} is not positive relative to {evals[0]:.3e}"
        )
    return SpdMatrix(_readonly(S), _readonly(evals), _readonly(evecs), False)


def matrix_exp_scaled(S: SpdMatrix, t: float) -> np.ndarray:
    """``exp(-t S)`` through the eigendecomposition of ``S``."""
    if not math.isfinite(t) or t < 0:
        raise ValueError("t must be finite and non-negative")
    if S.is_diagonal:
        return np.diag(np.exp(-t * np.diag(S.entries)))
    V = S.eigvecs
    return (V * np.exp(-t * S.eigvals)) @ V.T


def _lp(v: np.ndarray, p: float) -> np.ndarray:
    a = np.abs(v)
    if p == 1.0:
        return np.sum(a, axis=-1)
    if math.isinf(p):
        return np.max(a, axis=-1)
    # rescale before powering to avoid overflow/underflow
    m = np.max(a, axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    b = a / safe
    if p == 2.0:
        return np.squeeze(safe, -1) * np.sqrt(np.sum(b * b, axis=-1))
    return np.squeeze(safe, -1) * np.sum(b ** p, axis=-1) ** (1.0 / p)


def _scaled_root(quad, v: np.ndarray) -> np.ndarray:
    # sqrt of a quadratic form, rescaled by max |v| against under/overflow
    m = np.max(np.abs(v), axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    return np.squeeze(safe, -1) * np.sqrt(np.maximum(quad(v / safe), 0.0))


@dataclass(frozen=True, eq=False)
class AttackNorm:
    """The attacker's norm: an ``l_p`` norm or a Mahalanobis norm ``||B^{1/2} x||_2``.

    ``p`` uses ``math.inf`` for the max-norm. The dual norm is ``l_q`` with
    ``1/p + 1/q = 1`` for ``l_p`` attacks, and the ``B^{-1}``-Mahalanobis norm
    for Mahalanobis attacks.
    """

    kind: str
    p: float = 2.0
    B: Optional[SpdMatrix] = None

    def __post_init__(self):
        if self.kind == "lp":
            if not (self.p >= 1.0):
                raise ValueError(f"p must lie in [1, inf], got {self.p}")
        elif self.kind == "mahalanobis":
            if not isinstance(self.B, SpdMatrix):
                raise TypeError("Mahalanobis attacks need an SpdMatrix B")
        else:
            raise ValueError(f"unknown norm kind {self.kind!r}")

    @classmethod
    def lp(cls, p: float) -> "AttackNorm":
        return cls("lp", float(p))

    @classmethod
    def l1(cls) -> "AttackNorm":
        return cls("lp", 1.0)

    @classmethod
    def l2(cls) -> "AttackNorm":
        return cls("lp", 2.0)

    @classmethod
    def linf(cls) -> "AttackNorm":
        return cls("lp", math.inf)

    @classmethod
    def mahalanobis(cls, B: SpdMatrix) -> "AttackNorm":
        return cls("mahalanobis", 2.0, B)

    @property
    def q(self) -> float:
        """Dual exponent (only meaningful for ``l_p`` attacks)."""
        if self.kind != "lp":
            raise WrongNorm("dual exponent is defined for l_p attacks only")
        if self.p == 1.0:
            return math.inf
        if math.isinf(self.p):
            return 1.0
        return self.p / (self.p - 1.0)

    @property
    def is_euclidean(self) -> bool:
        return self.kind == "lp" and self.p == 2.0

    @property
    def label(self) -> str:
        if self.kind == "mahalanobis":
            return "mahalanobis"
        return "linf" if math.isinf(self.p) else f"l{self.p:g}"

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.B is not None and v.shape[-1] != self.B.dim:
            raise DimensionMismatch(f"vector length {v.shape[-1]} != norm dimension {self.B.dim}")
        return v

    def norm(self, v) -> np.ndarray:
        v = self._check(v)
        if self.kind == "lp":
            return _lp(v, self.p)
        return _scaled_root(self.B.quad, v)

    def dual_norm(self, v) -> np.ndarray:
        v = self._check(v)
        if self.kind == "lp":
            return _lp(v, self.q)
        return _scaled_root(self.B.inv_quad, v)


def norm(v, n: AttackNorm) -> float:
    """Attack norm of a single vector."""
    return float(n.norm(as_vector(v)))


def dual_norm(v, n: AttackNorm) -> float:
    """Dual of the attack norm, evaluated at a single vector."""
    return float(n.dual_norm(as_vector(v)))


def mahalanobis(v, S: SpdMatrix) -> float:
    """``sqrt(v^T S v)``."""
    v = as_vector(v, S.dim)
    return math.sqrt(max(float(S.quad(v)), 0.0))


@dataclass(frozen=True)
class ConditionReport:
    """Extremes of ``||M w||_2 / ||w||_*`` and their ratio.

    When ``exact`` is false the extremes come from a finite candidate set, so
    ``lambda_max`` is a lower bound and ``lambda_min`` an upper bound on the
    true values.
    """

    lambda_max: float
    lambda_min: float
    kappa: float
    exact: bool


def condition_number(M, n: AttackNorm, samples: int = 512, seed: int = 0) -> ConditionReport:
    """Norm-dependent condition number of ``M`` w.r.t. the attacker's dual norm.

    Euclidean and Mahalanobis attacks are handled exactly through singular
    values (for ``||.||_B`` the substitution ``w = B^{1/2} u`` turns the dual
    norm into ``||u||_2``). Other ``l_p`` attacks are estimated over the
    coordinate vectors, the all-ones vector, the extreme right singular
    vectors and their sign patterns, and ``samples`` Gaussian directions.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {M.shape}")
    d = M.shape[0]
    if n.B is not None and n.B.dim != d:
        raise DimensionMismatch("matrix and norm dimensions differ")
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-13 * sv[0]:
        raise Singular("matrix is numerically singular")

    if n.kind == "mahalanobis" or n.is_euclidean:
        A = M if n.is_euclidean else M @ n.B.sqrt()
        s = np.linalg.svd(A, compute_uv=False)
        lmax, lmin = float(s[0]), float(s[-1])
        return ConditionReport(lmax, lmin, lmax / lmin, True)

    _, _, vt = np.linalg.svd(M)
    top, bottom = vt[0], vt[-1]
    rng = np.random.default_rng(seed)
    cands = np.vstack(
        [
            np.eye(d),
            np.ones((1, d)),
            top,
            bottom,
            np.sign(top) + (top == 0),
            np.sign(bottom) + (bottom == 0),
            rng.standard_normal((samples, d)),
        ]
    )
    ratios = np.linalg.norm(cands @ M.T, axis=1) / n.dual_norm(cands)
    lmax, lmin = float(np.max(ratios)), float(np.min(ratios))
    return ConditionReport(lmax, lmin, max(lmax / lmin, 1.0), False)
