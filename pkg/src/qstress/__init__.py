"""Reactive-power stress minimization for transmission grids."""

from .case_io import GridCase, load_case, parse_matpower_case, parse_native_case, write_native_case
from .network_model import NetworkModel, build_model, collapse_margin

__version__ = "0.1.0"

__all__ = [
    "GridCase", "NetworkModel", "build_model", "collapse_margin", "load_case",
    "parse_matpower_case", "parse_native_case", "write_native_case",
]
