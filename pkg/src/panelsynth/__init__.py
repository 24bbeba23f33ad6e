"""Synthetic augmentation of sparse event-study panels with matched DiD estimation."""

from panelsynth.errors import PanelSynthError
from panelsynth.panel import LongPanel, Schema, VariableSpec, WideTable, load_long_csv, to_wide

__version__ = "0.1.0"

__all__ = [
    "LongPanel",
    "PanelSynthError",
    "Schema",
    "VariableSpec",
    "WideTable",
    "load_long_csv",
    "to_wide",
    "__version__",
]
