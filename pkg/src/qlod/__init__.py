"""Localized orthogonal decomposition for nonmonotone quasilinear elliptic problems."""

from .coefficient import CombinedCoefficient, NonlinearModel, SpatialField, build_coefficient
from .corrector import CorrectorSet, assemble_corrector_set, build_linearization
from .harness import ExperimentConfig, Experiment, run_convergence_study, run_iteration_study
from .interpolation import build_transfer, interpolate
from .mesh import MeshPair, StructuredMesh, build_mesh, build_patch
from .solver import MultiscaleBasis, solve_lod, solve_reference

__version__ = "0.1.0"

__all__ = [
    "CombinedCoefficient",
    "CorrectorSet",
    "Experiment",
    "ExperimentConfig",
    "MeshPair",
    "MultiscaleBasis",
    "NonlinearModel",
    "SpatialField",
    "StructuredMesh",
    "assemble_corrector_set",
    "build_coefficient",
    "build_linearization",
    "build_mesh",
    "build_patch",
    "build_transfer",
    "interpolate",
    "run_convergence_study",
    "run_iteration_study",
    "solve_lod",
    "solve_reference",
]
