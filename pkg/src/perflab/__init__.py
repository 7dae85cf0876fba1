"""Spectral homogenization laboratory for periodically perforated domains."""
from .cell import CellData, compute_cell_data
from .geometry import BoxDomain, PerforationSpec, perforate_domain
from .lab import ExperimentConfig, RateReport, run_config

__version__ = "0.1.0"

__all__ = ["BoxDomain", "CellData", "ExperimentConfig", "PerforationSpec", "RateReport",
           "compute_cell_data", "perforate_domain", "run_config"]
