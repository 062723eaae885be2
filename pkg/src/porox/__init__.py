"""HDG solver for the scaled degenerate elliptic equation of two-phase porous flow."""

from .analysis import ConvergenceTable, Region, l2_error, rates, run_study
from .hdg import HDGSolution, HDGSpace, assemble_monolithic, solve
from .mesh import Mesh, build_structured_mesh
from .physics import ManufacturedCase, StabilizationPolicy, builtin_case

__version__ = "0.1.0"

__all__ = [
    "ConvergenceTable", "HDGSolution", "HDGSpace", "ManufacturedCase", "Mesh", "Region",
    "StabilizationPolicy", "assemble_monolithic", "build_structured_mesh", "builtin_case",
    "l2_error", "rates", "run_study", "solve",
]
