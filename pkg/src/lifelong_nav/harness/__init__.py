"""Experiment orchestration and the command-line interface."""

from .config import REGIMES, RunConfig, load_config, parse_config
from .study import collect, evaluate_regime, run_study, train_regime

__all__ = ["REGIMES", "RunConfig", "load_config", "parse_config", "collect", "evaluate_regime", "run_study", "train_regime"]
