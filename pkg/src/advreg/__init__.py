"""Adversarially robust linear regression under Gaussian features.

Closed-form adversarial risk and its convex proxy, optimal-risk oracles,
gradient-flow trajectories with early stopping, the two-stage estimator and
its Stage-2 solvers.
"""
from .core import AttackNorm, SpdMatrix, condition_number, dual_norm, norm, spd_from_dense
from .risk import ALPHA, BETA, C0, Problem, adversarial_risk

__all__ = [
    "AttackNorm",
    "SpdMatrix",
    "spd_from_dense",
    "condition_number",
    "norm",
    "dual_norm",
    "Problem",
    "adversarial_risk",
    "C0",
    "ALPHA",
    "BETA",
]
