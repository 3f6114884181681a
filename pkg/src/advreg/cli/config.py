"""Experiment configuration and the CSV curve table."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..errors import ConfigError

__all__ = ["ExperimentConfig", "parse_config_text", "load_config", "CurveTable", "DEFAULTS"]


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of one batch run; every field can be set from a config file."""

    experiment: str
    seed: int = 0
    r_grid: Tuple[float, ...] = ()
    dims: Tuple[int, ...] = (2,)
    replicate_count: int = 5
    output_dir: str = "out"
    emit_svg: bool = False
    ns: Tuple[int, ...] = (250, 1000, 4000)
    m_values: Tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0, 10000.0)
    sparsity: int = 10
    sigma_eps: float = 0.5
    max_iter: int = 20_000
    workers: int = 1

    def __post_init__(self):
        if self.replicate_count < 1:
            raise ConfigError("replicate_count must be at least 1")
        if any(b <= a for a, b in zip(self.r_grid, self.r_grid[1:])):
            raise ConfigError("r_grid must be strictly increasing")
        if any(r < 0 or not math.isfinite(r) for r in self.r_grid):
            raise ConfigError("r_grid entries must be finite and non-negative")
        if any(d < 1 for d in self.dims) or any(n < 1 for n in self.ns):
            raise ConfigError("dims and ns must be positive")
        if self.workers < 1 or self.max_iter < 1:
            raise ConfigError("workers and max_iter must be positive")
        if self.sigma_eps < 0:
            raise ConfigError("sigma_eps must be non-negative")


def _linspace(a, b, k):
    return tuple(a + (b - a) * i / (k - 1) for i in range(k))


# Pinned seeds and desk-scale grids for each experiment.
DEFAULTS: Dict[str, Dict] = {
    "fig-l2": dict(seed=1, r_grid=_linspace(0.0, 2.0, 21), dims=(2,)),
    "fig-mahalanobis": dict(seed=0, r_grid=(1.0,), dims=(2,), replicate_count=1),
    "fig-sufficient": dict(seed=0, r_grid=_linspace(0.0, 2.0, 21), dims=(2,), replicate_count=1),
    "fig-lp": dict(seed=3, r_grid=_linspace(0.05, 1.5, 30), dims=(2,)),
    "fig-twostage": dict(seed=5, r_grid=(0.01, 0.02, 0.05, 0.1, 0.2), dims=(200,)),
    "fig-compare": dict(seed=6, r_grid=(0.0, 0.05, 0.1, 0.2), dims=(200,), max_iter=5000),
    "check": dict(seed=0, r_grid=(0.1, 0.5, 1.0), dims=(2, 5, 20), replicate_count=20),
}

_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "str":
            return raw
        parts = [p for p in raw.replace(",", " ").split() if p]
        if "int" in kind:
            return tuple(int(p) for p in parts)
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment, lists use commas or spaces."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _TYPES or key == "experiment":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, raw.strip())
    return out


def load_config(experiment: str, path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Defaults for ``experiment``, then the config file, then explicit overrides."""
    if experiment not in DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    values = dict(DEFAULTS[experiment])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        values.update(parse_config_text(text))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(experiment=experiment, **values)


@dataclass
class CurveTable:
    """Rows ``(x, series, y, seed)`` with a fixed series vocabulary.

    Series names may carry a ``@`` suffix (``gd@n250``); only the part
    before it is checked against the vocabulary.
    """

    vocabulary: Tuple[str, ...]
    rows: List[Tuple[float, str, float, int]] = field(default_factory=list)

    def add(self, x: float, series: str, y: float, seed: int) -> None:
        base = series.split("@", 1)[0]
        if base not in self.vocabulary:
            raise ValueError(f"series {series!r} not in {self.vocabulary}")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError(f"non-finite value in series {series!r}")
        self.rows.append((float(x), series, float(y), int(seed)))

    def extend(self, other: "CurveTable") -> None:
        for row in other.rows:
            self.add(*row)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda row: (row[1], row[0], row[3], row[2]))

    def series(self, name: str, seed: Optional[int] = None):
        """``(x, y)`` pairs of one series, sorted by ``x``."""
        pts = [(x, y) for x, s, y, sd in self.sorted_rows() if s == name and (seed is None or sd == seed)]
        return pts

    def to_csv(self) -> str:
        lines = ["x,series,y,seed"]
        for x, s, y, sd in self.sorted_rows():
            lines.append(f"{x:.12g},{s},{y:.12g},{sd}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())
