"""Command-line entry point.

Usage::

    advreg <subcommand> [--config FILE] [--seed N] [--out DIR] [--svg]

Figure subcommands and ``check`` write ``<out>/<subcommand>.csv`` (and an
SVG with ``--svg``) and print one line per invariant check. ``risk``,
``oracle`` and ``solve`` evaluate a single problem given on the command
line. Exit codes: 0 success, 1 invariant failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import secrets
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..core import AttackNorm, SpdMatrix, spd_from_dense
from ..errors import AdvRegError, ConfigError
from ..risk import Problem, adversarial_risk, chord_optimum, optimal_risk_grid, optimal_risk_ridge_path
from ..solvers import PdConfig, chambolle_pock, soft_threshold_path
from .checks import cmd_check
from .config import load_config
from .figures import FIGURES, FigureResult
from .svg import line_plot

EXPERIMENTS = dict(FIGURES, check=cmd_check)


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise ConfigError(f"not a list of numbers: {text!r}") from None


def _sigma(args, d: int) -> SpdMatrix:
    if args.sigma_diag:
        return SpdMatrix.diag(_vector(args.sigma_diag))
    if args.sigma:
        rows = [_vector(row) for row in args.sigma.split(";")]
        return spd_from_dense(np.array(rows))
    return SpdMatrix.identity(d)


def parse_norm(text: str, d: int) -> AttackNorm:
    """``l1``, ``l2``, ``linf``, ``lp:P`` or ``mahalanobis:b1,b2,...`` (diagonal ``B``)."""
    text = text.strip().lower()
    named = {"l1": AttackNorm.l1, "l2": AttackNorm.l2, "linf": AttackNorm.linf}
    if text in named:
        return named[text]()
    kind, _, rest = text.partition(":")
    if kind == "lp" and rest:
        return AttackNorm.lp(float(rest))
    if kind == "mahalanobis" and rest:
        return AttackNorm.mahalanobis(SpdMatrix.diag(_vector(rest)))
    raise ConfigError(f"unknown norm {text!r}")


def _problem(args) -> Problem:
    w0 = _vector(args.w0)
    return Problem(w0, _sigma(args, w0.size), parse_norm(args.norm, w0.size), args.r)


def _fmt(v) -> str:
    return " ".join(f"{x:.12g}" for x in np.atleast_1d(v))


def _run_experiment(args) -> int:
    seed = secrets.randbelow(2 ** 31) if args.resample else args.seed
    cfg = load_config(args.command, args.config, seed=seed, output_dir=args.out,
                      emit_svg=True if args.svg else None, workers=args.workers)
    if args.resample:
        print(f"seed={seed}")
    result: FigureResult = EXPERIMENTS[args.command](cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.table.write(out / f"{args.command}.csv")
    if cfg.emit_svg:
        names = sorted({s for _, s, _, _ in result.table.rows})
        curves = {}
        for name in names:
            pts = {}
            for x, y in result.table.series(name):
                pts.setdefault(x, []).append(y)
            curves[name] = [(x, float(np.median(v))) for x, v in sorted(pts.items())]
        svg = line_plot(curves, result.title, result.xlabel, result.ylabel, result.logx, result.logy)
        (out / f"{args.command}.svg").write_text(svg)
    width = max((len(c.name) for c in result.checks), default=0)
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}")
    return 0 if result.ok else 1


def _run_risk(args) -> int:
    prob = _problem(args)
    rep = adversarial_risk(_vector(args.w), prob)
    print(f"exact={rep.exact:.12g}\nproxy={rep.proxy:.12g}\nstandard={rep.standard:.12g}")
    return 0


def _run_oracle(args) -> int:
    prob = _problem(args)
    if args.method == "grid":
        rep = optimal_risk_grid(prob, objective=args.objective)
    elif args.method == "ridge":
        rep = optimal_risk_ridge_path(prob, objective=args.objective)
    else:
        rep = chord_optimum(prob)
    print(f"value={rep.value:.12g}\nminimizer={_fmt(rep.minimizer)}")
    return 0


def _run_solve(args) -> int:
    prob = _problem(args)
    if args.method == "st":
        if not (prob.attack.kind == "lp" and np.isinf(prob.attack.p)):
            raise ConfigError("the soft-threshold path needs --norm linf")
        if not prob.sigma.is_diagonal:
            raise ConfigError("the soft-threshold path needs --sigma-diag")
        w = soft_threshold_path(prob.w0, prob.sigma.diagonal, prob.r).best_w
    else:
        w, _ = chambolle_pock(prob.w0, prob.sigma, prob.attack, prob.r, PdConfig(max_iter=args.max_iter))
    rep = adversarial_risk(w, prob)
    print(f"w={_fmt(w)}\nproxy={rep.proxy:.12g}\nexact={rep.exact:.12g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the pinned seed")
        p.add_argument("--resample", action="store_true", help="draw a fresh seed and print it")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--svg", action="store_true", help="also write an SVG plot")
        p.add_argument("--workers", type=int, help="process pool size")
        p.set_defaults(func=_run_experiment)

    def problem_args(p):
        p.add_argument("--w0", required=True, help="generative model, comma separated")
        p.add_argument("--sigma-diag", help="diagonal covariance entries")
        p.add_argument("--sigma", help="dense covariance, rows separated by ';'")
        p.add_argument("--norm", default="l2", help="l1, l2, linf, lp:P or mahalanobis:b1,b2,...")
        p.add_argument("--r", type=float, required=True, help="attack budget")

    p = sub.add_parser("risk", help="exact and proxy risk of a model")
    problem_args(p)
    p.add_argument("--w", required=True, help="model to evaluate")
    p.set_defaults(func=_run_risk)

    p = sub.add_parser("oracle", help="optimal risk by grid, ridge path or best shrinkage")
    problem_args(p)
    p.add_argument("--method", choices=("grid", "ridge", "chord"), default="grid")
    p.add_argument("--objective", choices=("exact", "proxy"), default="exact")
    p.set_defaults(func=_run_oracle)

    p = sub.add_parser("solve", help="minimise the proxy risk")
    problem_args(p)
    p.add_argument("--method", choices=("pd", "st"), default="pd")
    p.add_argument("--max-iter", type=int, default=20_000)
    p.set_defaults(func=_run_solve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except AdvRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
