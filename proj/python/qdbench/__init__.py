"""Forecasting benchmark for spin-boson population dynamics."""

from ._qdbench import *  # noqa: F401,F403
from ._qdbench import (
    ConfigError,
    DivergenceError,
    MissingInputError,
    NumericalError,
    run_cli,
)

__all__ = [name for name in dir() if not name.startswith("_")]
