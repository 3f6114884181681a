"""Batch experiment runner and single-problem utilities."""
from .config import CurveTable, ExperimentConfig, load_config, parse_config_text
from .figures import FIGURES, FigureResult

__all__ = ["CurveTable", "ExperimentConfig", "load_config", "parse_config_text", "FIGURES", "FigureResult"]
