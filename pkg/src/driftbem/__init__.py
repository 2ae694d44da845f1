"""Boundary-integral solvers and exit-distribution tools for constant-drift operators.

The operator family is L u = -div(A grad u) + b . grad u on star-shaped
Lipschitz polyhedra in R^3, with A constant symmetric positive definite and b a
constant drift vector.  The package provides:

* triangulated boundary meshes with corkscrew points, surface balls and
  nontangential cones (:mod:`driftbem.geometry`),
* the closed-form free-space kernel of L and its adjoint
  (:mod:`driftbem.kernels`),
* single-layer boundary operators, tangential gradients, one-sided conormal
  traces and adjoint-layer operators (:mod:`driftbem.layer_potentials`),
* boundary-value solvers, domain Green functions and operator symmetrization
  (:mod:`driftbem.bie_solver`),
* exit-distribution sampling and kernel-based boundary measures
  (:mod:`driftbem.harmonic_measure`),
* quantitative estimate checks (:mod:`driftbem.verify`) and a CLI
  (:mod:`driftbem.cli`).
"""

from driftbem.geometry import DomainSpec, BoundaryMesh, build_mesh
from driftbem.kernels import Coefficients

__all__ = ["DomainSpec", "BoundaryMesh", "build_mesh", "Coefficients"]
__version__ = "0.1.0"
