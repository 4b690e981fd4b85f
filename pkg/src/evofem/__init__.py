"""Finite elements on evolving intervals and closed curves.

Flow maps and geometry (:mod:`evofem.flowmap`), transported P1 meshes and
assembly (:mod:`evofem.mesh`), pivot spaces with their lambda forms and
Pi_t operators (:mod:`evofem.spaces`), finite-difference oracles
(:mod:`evofem.checks`), the monotone time stepper (:mod:`evofem.solver`)
and the scenario CLI (:mod:`evofem.cli`).
"""
from .fields import make_field
from .flowmap import FlowMap, evolve_point, inverse_flow
from .mesh import EvolvingMesh, build_circle_mesh, build_interval_mesh
from .solver import OperatorSpec, ProblemConfig, solve
from .spaces import PivotSpec, make_pivot

__all__ = ["make_field", "FlowMap", "evolve_point", "inverse_flow", "EvolvingMesh",
           "build_circle_mesh", "build_interval_mesh", "OperatorSpec", "ProblemConfig",
           "solve", "PivotSpec", "make_pivot"]
__version__ = "0.1.0"
