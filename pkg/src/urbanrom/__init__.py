"""Reduced-order modelling of pollutant transport on obstacle-laden urban grids."""

from .grid import StructuredGrid, build_grid
from .flow import FluxField, WindParameter, solve_potential_flow
from .emission import EmissionSeries, PointSource, synthesize_series
from .fom import SnapshotMatrix, run_fom
from .pod import PodBasis, compute_pod
from .deim import DeimModel, build_deim
from .mlp import Mlp, TrainConfig
from .rom import RomOperators, build_rom, run_rom

__all__ = [
    "DeimModel",
    "EmissionSeries",
    "FluxField",
    "Mlp",
    "PodBasis",
    "PointSource",
    "RomOperators",
    "SnapshotMatrix",
    "StructuredGrid",
    "TrainConfig",
    "WindParameter",
    "build_deim",
    "build_grid",
    "build_rom",
    "compute_pod",
    "run_fom",
    "run_rom",
    "solve_potential_flow",
    "synthesize_series",
]

__version__ = "0.1.0"
