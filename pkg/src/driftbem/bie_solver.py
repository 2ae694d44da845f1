"""Boundary-integral solvers for L u = -div(A grad u) + b . grad u.

Two boundary problems are solved through single-layer representations:

* regularity data (values plus tangential gradient): the density solves the
  first-kind system [S; grad_T S] g = [f; grad_T f] in W^{1,2} least squares
  and the solution is the interior single-layer potential of g;
* Dirichlet data for the reversed-drift operator: the density solves the
  square system S_rev h = f and the solution is the reversed-drift potential
  of h.

On top of the solves the module provides interior evaluation (values and
gradients), the domain Green function as free-space kernel minus a corrector
solve, cone-based nontangential maximal functions, and the reduction of an
affine antisymmetric matrix perturbation to an equivalent constant drift.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from driftbem.geometry import BoundaryMesh, cone_samples
from driftbem.kernels import (
    Coefficients,
    fundamental_solution,
    fundamental_solution_gradient,
)
from driftbem.layer_potentials import (
    BoundaryField,
    DiscreteOperator,
    adjoint_single_layer_operator,
    l2_inner,
    offboundary_potential,
    single_layer_operator,
    tangential_gradient_operator,
)

SOLUTION_KINDS = ("regularity", "adjoint-dirichlet")
CONDITION_LIMIT = 1e12
DENSE_LIMIT = 6000
# Fixed weight on the tangential-gradient block of the least-squares
# functional (an equivalent W^{1,2} norm).  The value rows of the stacked
# system are markedly more accurate than the gradient rows at any fixed
# mesh, so equal weighting lets gradient-block inconsistency pollute the
# density; 0.5 rebalances the blocks while keeping full gradient control.
GRADIENT_WEIGHT = 0.5


class SolverError(RuntimeError):
    """Discrete system unusable (ill-conditioned or iteration failure)."""


@dataclass
class Solution:
    """Boundary density together with everything needed to evaluate u.

    kind "regularity" represents u as the direct single-layer potential of
    the density; kind "adjoint-dirichlet" as the reversed-drift potential.
    """

    kind: str
    density: np.ndarray
    mesh: BoundaryMesh
    coeffs: Coefficients
    boundary_data: BoundaryField
    residual: float
    condition: float

    def __post_init__(self):
        if self.kind not in SOLUTION_KINDS:
            raise ValueError(f"solution kind must be one of {SOLUTION_KINDS}")
        self.density = np.asarray(self.density, dtype=float)
        if not np.all(np.isfinite(self.density)):
            raise ValueError("solution density contains non-finite entries")
        if len(self.density) != self.mesh.n_nodes:
            raise ValueError("density length does not match mesh node count")

    def diagnostics(self) -> dict:
        return {
            "kind": self.kind,
            "n_nodes": int(self.mesh.n_nodes),
            "residual": float(self.residual),
            "condition": float(self.condition),
        }


# ---------------------------------------------------------------------------
# factorized systems (reusable across right-hand sides)
# ---------------------------------------------------------------------------

def _extreme_eigs(matvec, inv_apply, n, seed=5, n_iter=30):
    """Largest/smallest eigenvalue estimates of an SPD map by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lmax = 0.0
    for _ in range(n_iter):
        v = matvec(v)
        lmax = np.linalg.norm(v)
        if lmax == 0.0:
            return 0.0, 0.0
        v /= lmax
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    inv_norm = np.inf
    for _ in range(n_iter):
        u = inv_apply(u)
        inv_norm = np.linalg.norm(u)
        u /= inv_norm
    return float(lmax), float(1.0 / inv_norm)


@dataclass
class RegularitySystem:
    """W^{1,2} normal equations of [S; grad_T S], factorized once."""

    mesh: BoundaryMesh
    coeffs: Coefficients
    S: DiscreteOperator
    T: tuple
    _solve: callable
    condition: float
    gradient_weight: float = GRADIENT_WEIGHT

    def solve_data(self, f: BoundaryField):
        """Least-squares density for data (f, grad_T f); returns (g, residual).

        The reported residual is the plain (unweighted) relative W^{1,2}
        misfit, independent of the solve weighting.
        """
        w = self.mesh.weights
        gw2 = self.gradient_weight ** 2
        rhs = self.S.matrix.T @ (w * f.values)
        for a in (0, 1):
            rhs += gw2 * (self.T[a].matrix.T @ (w * f.tangential_gradient[:, a]))
        g = self._solve(rhs)
        rv = self.S.matrix @ g - f.values
        rg = [self.T[a].matrix @ g - f.tangential_gradient[:, a] for a in (0, 1)]
        num = l2_inner(self.mesh, rv, rv) + sum(l2_inner(self.mesh, r, r) for r in rg)
        den = l2_inner(self.mesh, f.values, f.values) + sum(
            l2_inner(self.mesh, f.tangential_gradient[:, a],
                     f.tangential_gradient[:, a]) for a in (0, 1))
        residual = float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
        return g, residual


@dataclass
class AdjointSystem:
    """LU-factorized square system S_rev h = f."""

    mesh: BoundaryMesh
    coeffs: Coefficients
    S: DiscreteOperator
    S_rev: DiscreteOperator
    _solve: callable
    condition: float

    def solve_data(self, f: BoundaryField):
        h = self._solve(f.values)
        r = self.S_rev.matrix @ h - f.values
        den = l2_inner(self.mesh, f.values, f.values)
        num = l2_inner(self.mesh, r, r)
        residual = float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
        return h, residual


def build_regularity_system(mesh: BoundaryMesh, coeffs: Coefficients,
                            operators=None,
                            gradient_weight: float = GRADIENT_WEIGHT
                            ) -> RegularitySystem:
    """Assemble and factorize the W^{1,2} normal equations.

    operators, when given, is the (S, T_1, T_2) triple; otherwise the
    boundary operators are assembled here.  The gradient rows carry the
    fixed block weight ``gradient_weight`` in the least-squares functional.
    Dense Cholesky up to DENSE_LIMIT unknowns, conjugate gradients with
    diagonal scaling beyond.
    """
    if operators is None:
        S = single_layer_operator(mesh, coeffs)
        T = tuple(tangential_gradient_operator(mesh, coeffs))
    else:
        S, T = operators[0], tuple(operators[1:])
    if not gradient_weight > 0:
        raise ValueError("gradient_weight must be positive")
    w = mesh.weights
    gw2 = gradient_weight ** 2
    mats = [(1.0, S.matrix), (gw2, T[0].matrix), (gw2, T[1].matrix)]
    n = mesh.n_nodes

    def gram_matvec(v):
        out = np.zeros_like(v)
        for c, M in mats:
            out += c * (M.T @ (w * (M @ v)))
        return out

    if n <= DENSE_LIMIT:
        gram = sum(c * (M.T @ (w[:, None] * M)) for c, M in mats)
        try:
            cho = scipy.linalg.cho_factor(gram)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError(f"normal equations not positive definite: {exc}")
        solve = lambda rhs: scipy.linalg.cho_solve(cho, rhs)
    else:
        diag = sum(c * np.einsum("ij,i,ij->j", M, w, M) for c, M in mats)
        precond = scipy.sparse.linalg.LinearOperator((n, n), lambda v: v / diag)
        op = scipy.sparse.linalg.LinearOperator((n, n), gram_matvec)

        def solve(rhs):
            sol, info = scipy.sparse.linalg.cg(op, rhs, M=precond,
                                               rtol=1e-12, maxiter=2000)
            if info != 0:
                raise SolverError(f"iterative normal-equation solve failed ({info})")
            return sol

    lmax, lmin = _extreme_eigs(gram_matvec, solve, n)
    condition = lmax / lmin if lmin > 0 else np.inf
    if condition > CONDITION_LIMIT:
        raise SolverError(
            f"normal equations condition estimate {condition:.3e} exceeds "
            f"{CONDITION_LIMIT:.0e}; refine the mesh or check the coefficients")
    return RegularitySystem(mesh=mesh, coeffs=coeffs, S=S, T=T,
                            _solve=solve, condition=condition,
                            gradient_weight=gradient_weight)


def build_adjoint_system(mesh: BoundaryMesh, coeffs: Coefficients,
                         operators=None) -> AdjointSystem:
    """Assemble and LU-factorize the reversed-drift boundary system."""
    S = operators[0] if operators is not None else single_layer_operator(mesh, coeffs)
    S_rev = adjoint_single_layer_operator(mesh, coeffs, direct=S)
    n = mesh.n_nodes
    A = S_rev.matrix
    if n <= DENSE_LIMIT:
        lu, piv = scipy.linalg.lu_factor(A)
        solve = lambda rhs: scipy.linalg.lu_solve((lu, piv), rhs)
        inv_gram = lambda u: scipy.linalg.lu_solve(
            (lu, piv), scipy.linalg.lu_solve((lu, piv), u, trans=1))
    else:
        def solve(rhs, mat=A):
            sol, info = scipy.sparse.linalg.gmres(
                scipy.sparse.linalg.aslinearoperator(mat), rhs,
                rtol=1e-12, maxiter=2000)
            if info != 0:
                raise SolverError(f"iterative boundary solve failed ({info})")
            return sol

        inv_gram = lambda u: solve(solve(u, mat=A.T))
    smax2, smin2 = _extreme_eigs(lambda v: A.T @ (A @ v), inv_gram, n)
    condition = np.sqrt(smax2 / smin2) if smin2 > 0 else np.inf
    if condition > CONDITION_LIMIT:
        raise SolverError(
            f"boundary system condition estimate {condition:.3e} exceeds "
            f"{CONDITION_LIMIT:.0e}; refine the mesh or check the coefficients")
    return AdjointSystem(mesh=mesh, coeffs=coeffs, S=S, S_rev=S_rev,
                         _solve=solve, condition=condition)


# ---------------------------------------------------------------------------
# the two solvers
# ---------------------------------------------------------------------------

def solve_regularity(mesh: BoundaryMesh, coeffs: Coefficients, f: BoundaryField,
                     system: RegularitySystem | None = None,
                     operators=None) -> Solution:
    """Solve the boundary problem from values-plus-tangential-gradient data.

    The density g satisfies the W^{1,2} least-squares system
    [S; grad_T S] g = [f; grad_T f], with the gradient rows carrying the
    fixed block weight GRADIENT_WEIGHT; the solution is u = S_+ g.  Passing
    a prebuilt system (or the operator triple) skips re-assembly.
    """
    if f.tangential_gradient is None:
        raise ValueError("regularity data must carry a tangential gradient")
    if system is None:
        system = build_regularity_system(mesh, coeffs, operators=operators)
    g, residual = system.solve_data(f)
    return Solution(kind="regularity", density=g, mesh=mesh, coeffs=coeffs,
                    boundary_data=f, residual=residual,
                    condition=system.condition)


def solve_dirichlet_adjoint(mesh: BoundaryMesh, coeffs: Coefficients,
                            f: BoundaryField,
                            system: AdjointSystem | None = None,
                            operators=None) -> Solution:
    """Solve the Dirichlet problem for the reversed-drift operator.

    The density h satisfies S_rev h = f and the solution is the
    reversed-drift single-layer potential of h, whose boundary trace is f.
    """
    if system is None:
        system = build_adjoint_system(mesh, coeffs, operators=operators)
    h, residual = system.solve_data(f)
    return Solution(kind="adjoint-dirichlet", density=h, mesh=mesh,
                    coeffs=coeffs, boundary_data=f, residual=residual,
                    condition=system.condition)


# ---------------------------------------------------------------------------
# interior evaluation
# ---------------------------------------------------------------------------

def _require_interior(mesh: BoundaryMesh, points: np.ndarray) -> None:
    if not np.all(mesh.contains(points)):
        raise ValueError("evaluation points must lie strictly inside the domain")
    d, _, _ = mesh.distance(points)
    scale = 1.0 + np.abs(points).max()
    if np.any(d <= 1e-12 * scale):
        raise ValueError("evaluation points must not lie on the boundary")


def _solution_kernel(sol: Solution) -> str:
    return "direct" if sol.kind == "regularity" else "adjoint"


def evaluate(sol: Solution, points) -> np.ndarray | float:
    """Interior values of the represented solution; rejects exterior points."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    _require_interior(sol.mesh, pts)
    vals = offboundary_potential(sol.mesh, sol.coeffs, sol.density, pts,
                                 kernel=_solution_kernel(sol))
    return float(vals[0]) if single else vals


def gradient_evaluate(sol: Solution, points) -> np.ndarray:
    """Interior gradients of the represented solution, (M, 3)."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    _require_interior(sol.mesh, pts)
    _, grads = offboundary_potential(sol.mesh, sol.coeffs, sol.density, pts,
                                     gradient=True, kernel=_solution_kernel(sol))
    return grads[0] if single else grads


def export_solution_csv(sol: Solution, points, path) -> None:
    """CSV rows (x, y, z, value, grad_x, grad_y, grad_z) at interior points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = evaluate(sol, pts)
    grads = gradient_evaluate(sol, pts)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "value", "grad_x", "grad_y", "grad_z"])
        for p, v, g in zip(pts, vals, grads):
            writer.writerow([f"{c:.17g}" for c in (*p, v, *g)])


# ---------------------------------------------------------------------------
# domain Green function
# ---------------------------------------------------------------------------

def _require_green_interior(mesh: BoundaryMesh, points: np.ndarray) -> None:
    margin = 2.0 * float(mesh.diameters.max())
    d, _, _ = mesh.distance(points)
    if not np.all(mesh.contains(points)) or np.any(d < margin):
        raise ValueError(
            f"Green-function arguments must be interior points at least "
            f"{margin:.3g} (two panel diameters) from the boundary")


def green_corrector(mesh: BoundaryMesh, coeffs: Coefficients, y,
                    system: RegularitySystem | None = None) -> Solution:
    """Corrector solve with boundary data Gamma(., y) and its exact gradient.

    Subtracting the corrector from the free-space kernel yields the domain
    Green function with pole y for the operator the coefficients describe.
    """
    y = np.asarray(y, dtype=float).reshape(3)
    _require_green_interior(mesh, y[None, :])
    vals = fundamental_solution(coeffs, mesh.nodes, y[None, :])
    grads = fundamental_solution_gradient(coeffs, mesh.nodes, y[None, :])
    frame = mesh.node_tangent_frame
    tg = np.stack([np.einsum("nj,nj->n", frame[:, a, :], grads) for a in (0, 1)],
                  axis=1)
    data = BoundaryField(values=vals, tangential_gradient=tg, mesh=mesh)
    return solve_regularity(mesh, coeffs, data, system=system)


def domain_green(mesh: BoundaryMesh, coeffs: Coefficients, x, y,
                 system: RegularitySystem | None = None):
    """Domain Green function G(x, y) = Gamma(x, y) - corrector_y(x).

    x may be a single point or an (M, 3) batch sharing the pole y.  Both
    arguments must be interior with two panel diameters of clearance, and
    x = y is rejected.
    """
    y = np.asarray(y, dtype=float).reshape(3)
    x2 = np.asarray(x, dtype=float)
    single = x2.ndim == 1
    x2 = np.atleast_2d(x2)
    if np.any(np.linalg.norm(x2 - y, axis=1) < 1e-12 * (1.0 + np.abs(y).max())):
        raise ValueError("Green function requested at coincident arguments")
    _require_green_interior(mesh, np.vstack([x2, y[None, :]]))
    corr = green_corrector(mesh, coeffs, y, system=system)
    vals = fundamental_solution(coeffs, x2, y[None, :]) - evaluate(corr, x2)
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# constant-drift reduction of affine antisymmetric perturbations
# ---------------------------------------------------------------------------

def symmetrize_operator(coeffs: Coefficients,
                        bounding_box=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                        check_tol: float = 1e-8) -> Coefficients:
    """Fold an affine antisymmetric matrix part into an extra constant drift.

    For A_full(x) = A + sum_k x_k C_k with antisymmetric C_k the divergence of
    the antisymmetric part acts on gradients as a constant drift
    b~_i = sum_j (C_j)_{ij}, which is divergence free.  Returns equivalent
    constant coefficients (A, b + b~).  Ellipticity of A_full is checked at
    the corners of the bounding box (the smallest eigenvalue is concave in x,
    so corner checks cover the box), and the weak-form identity
    int A_full grad u . grad phi + b . grad u phi
      = int A grad u . grad phi + (b + b~) . grad u phi
    is verified against Gaussian-weighted quadrature for random cubics.
    """
    if coeffs.antisym_affine is None:
        return Coefficients(A=coeffs.A.copy(), b=coeffs.b.copy())
    C = coeffs.antisym_affine
    lo, hi = (np.asarray(v, dtype=float) for v in bounding_box)
    for corner in range(8):
        x = np.where([(corner >> k) & 1 for k in range(3)], hi, lo)
        w = np.linalg.eigvalsh(0.5 * (coeffs.matrix_at(x) + coeffs.matrix_at(x).T))
        if w[0] <= 0:
            raise ValueError(
                f"full coefficient matrix loses ellipticity at {x} "
                f"(smallest symmetric-part eigenvalue {w[0]:.3e})")
    btilde = np.einsum("jij->i", C)
    out = Coefficients(A=coeffs.A.copy(), b=coeffs.b + btilde)
    res = _weak_form_residual(coeffs, out)
    if res > check_tol:
        raise SolverError(
            f"weak-form verification of the drift reduction failed ({res:.3e})")
    return out


def _weak_form_residual(full: Coefficients, reduced: Coefficients,
                        seed: int = 21) -> float:
    """Relative defect of the two weak forms on random cubics x Gaussian bump.

    Both test integrals use the same tensor Gauss-Hermite rule, which is
    exact for polynomial-times-Gaussian integrands of this degree, so the
    identity holds to rounding when the reduction is correct.
    """
    nodes, wts = np.polynomial.hermite_e.hermegauss(10)
    X, Y, Z = np.meshgrid(nodes, nodes, nodes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    wq = (wts[:, None, None] * wts[None, :, None] * wts[None, None, :]).ravel()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(3):
        cu = rng.standard_normal((3, 4))
        pair = rng.standard_normal(3)

        def grad_u(p):
            # u = per-axis random cubics + c*xyz + pair products xy, yz, xz
            g = cu[:, 0] + 2.0 * cu[:, 1] * p + 3.0 * cu[:, 2] * p**2
            cross = cu[0, 3]
            g = g.copy()
            g[:, 0] += cross * p[:, 1] * p[:, 2] + pair[0] * p[:, 1] + pair[2] * p[:, 2]
            g[:, 1] += cross * p[:, 0] * p[:, 2] + pair[0] * p[:, 0] + pair[1] * p[:, 2]
            g[:, 2] += cross * p[:, 0] * p[:, 1] + pair[1] * p[:, 1] + pair[2] * p[:, 0]
            return g

        gu = grad_u(pts)
        # phi = Gaussian bump exp(-|p|^2/2): the quadrature weight itself
        gphi = -pts
        Afull = full.A + np.einsum("nk,kij->nij", pts, full.antisym_affine)
        lhs = np.sum(wq * (np.einsum("nij,nj,ni->n", Afull, gu, gphi)
                           + (gu @ full.b)))
        rhs = np.sum(wq * (np.einsum("ij,nj,ni->n", reduced.A, gu, gphi)
                           + (gu @ reduced.b)))
        scale = max(abs(lhs), abs(rhs), 1e-30)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


# ---------------------------------------------------------------------------
# nontangential maximal functions
# ---------------------------------------------------------------------------

def nontangential_maximal(sol: Solution, which: str = "u", n_rays: int = 8,
                          n_radii: int = 6, aperture: float = np.pi / 4,
                          a: float = 1.0, r_min: float | None = None,
                          r_max: float | None = None, node_ids=None):
    """Per-node sup of |u| or |grad u| over deterministic cone samples.

    Nodes whose cones produce no admissible samples are flagged and carry 0.
    Returns a BoundaryField; with ``node_ids`` the sup is computed on that
    node subset only and a plain ``(values, flags)`` pair comes back.
    """
    if which not in ("u", "gradient"):
        raise ValueError("which must be 'u' or 'gradient'")
    mesh = sol.mesh
    ids = np.arange(mesh.n_nodes) if node_ids is None else np.asarray(node_ids)
    chunks = []
    counts = np.zeros(len(ids), dtype=int)
    for k, i in enumerate(ids):
        cs = cone_samples(mesh, mesh.nodes[i], n_rays=n_rays, n_radii=n_radii,
                          aperture=aperture, a=a, r_min=r_min, r_max=r_max)
        counts[k] = len(cs.points)
        if counts[k]:
            chunks.append(cs.points)
    flags = counts == 0
    sups = np.zeros(len(ids))
    if chunks:
        pts = np.vstack(chunks)
        if which == "u":
            mags = np.abs(evaluate(sol, pts))
        else:
            mags = np.linalg.norm(gradient_evaluate(sol, pts), axis=1)
        offsets = np.concatenate([[0], np.cumsum(counts[~flags])[:-1]])
        sups[~flags] = np.maximum.reduceat(mags, offsets)
    if node_ids is not None:
        return sups, flags
    return BoundaryField(values=sups, mesh=mesh, flags=flags)
