"""Shared fixtures.

The level-4 sphere operators are expensive (dense 5120x5120 assemblies), so
they are built once per session and shared by the operator tests and the
acceptance suite.  Everything is deterministic; fixtures hold immutable data.
"""

import numpy as np
import pytest

from driftbem.geometry import DomainSpec, build_mesh
from driftbem.kernels import Coefficients
from driftbem import layer_potentials as lp
from driftbem import bie_solver as bs


@pytest.fixture(scope="session")
def laplace():
    return Coefficients.laplace()


@pytest.fixture(scope="session")
def drift_x():
    return Coefficients(A=np.eye(3), b=np.array([1.0, 0.0, 0.0]))


@pytest.fixture(scope="session")
def sphere2():
    return build_mesh(DomainSpec(kind="sphere-approximation", level=2))


@pytest.fixture(scope="session")
def sphere3():
    return build_mesh(DomainSpec(kind="sphere-approximation", level=3))


@pytest.fixture(scope="session")
def sphere4():
    return build_mesh(DomainSpec(kind="sphere-approximation", level=4))


@pytest.fixture(scope="session")
def ops2(sphere2, laplace):
    S = lp.single_layer_operator(sphere2, laplace, singular_rule="duffy")
    T = lp.tangential_gradient_operator(sphere2, laplace, singular_rule="kernel-split")
    return {"S": S, "T": T}


@pytest.fixture(scope="session")
def ops3(sphere3, laplace):
    S = lp.single_layer_operator(sphere3, laplace, singular_rule="duffy")
    T = lp.tangential_gradient_operator(sphere3, laplace, singular_rule="kernel-split")
    return {"S": S, "T": T}


@pytest.fixture(scope="session")
def ops4(sphere4, laplace):
    S = lp.single_layer_operator(sphere4, laplace, singular_rule="duffy")
    T = lp.tangential_gradient_operator(sphere4, laplace, singular_rule="kernel-split")
    return {"S": S, "T": T}


def analytic_field(mesh, fn, grad_fn=None):
    """BoundaryField sampling fn at the nodes, with the tangential projection
    of grad_fn when a gradient is supplied."""
    vals = fn(mesh.nodes)
    if grad_fn is None:
        return lp.BoundaryField(values=vals, mesh=mesh)
    g = grad_fn(mesh.nodes)
    frame = mesh.node_tangent_frame
    tg = np.stack([np.einsum("nj,nj->n", frame[:, a, :], g) for a in (0, 1)],
                  axis=1)
    return lp.BoundaryField(values=vals, tangential_gradient=tg, mesh=mesh)


def coordinate_field(mesh, axis):
    """Trace of the coordinate function x_axis with its tangential gradient."""
    e = np.zeros(3)
    e[axis] = 1.0
    return analytic_field(mesh, lambda x: x[:, axis],
                          lambda x: np.tile(e, (len(x), 1)))


@pytest.fixture(scope="session")
def reg_sys3(sphere3, laplace, ops3):
    return bs.build_regularity_system(sphere3, laplace,
                                      operators=(ops3["S"], *ops3["T"]))


@pytest.fixture(scope="session")
def adj_sys3(sphere3, laplace, ops3):
    return bs.build_adjoint_system(sphere3, laplace, operators=(ops3["S"],))


@pytest.fixture(scope="session")
def drift_ops3(sphere3, drift_x):
    S = lp.single_layer_operator(sphere3, drift_x, singular_rule="duffy")
    T = lp.tangential_gradient_operator(sphere3, drift_x,
                                        singular_rule="kernel-split")
    return {"S": S, "T": T}


@pytest.fixture(scope="session")
def drift_ops4(sphere4, drift_x):
    S = lp.single_layer_operator(sphere4, drift_x, singular_rule="duffy")
    T = lp.tangential_gradient_operator(sphere4, drift_x,
                                        singular_rule="kernel-split")
    return {"S": S, "T": T}


def smooth_family(mesh):
    """Ten smooth boundary functions used by the jump/refinement studies."""
    x, y, z = mesh.nodes.T
    cols = [
        np.ones_like(x),
        x, y, z,
        x * y,
        y * z,
        x * x - z * z,
        np.exp(0.5 * x),
        np.sin(y),
        1.0 / (2.0 + z),
    ]
    return np.stack(cols, axis=1)


def _jump_bundle(mesh, coeffs):
    """Both-sided conormals of the smooth family from one raw-offset pass.

    "interior"/"exterior" carry the Richardson-extrapolated values (the
    accurate estimates); "interior_raw"/"exterior_raw" keep the per-offset
    values, whose finest column has an O(panel size) error that refinement
    studies can watch shrinking (the extrapolated values sit at a
    level-independent accuracy floor).
    """
    fam = smooth_family(mesh)
    out = {"family": fam}
    flags = np.zeros(mesh.n_nodes, dtype=bool)
    for side in ("interior", "exterior"):
        raw, fl = lp.conormal_onesided(mesh, coeffs, fam, side=side,
                                       extrapolate=False)
        out[side + "_raw"] = raw
        out[side] = (raw[..., 0] - 6.0 * raw[..., 1] + 8.0 * raw[..., 2]) / 3.0
        flags |= fl
    out["flags"] = flags
    return out


@pytest.fixture(scope="session")
def jump3(sphere3, laplace):
    return _jump_bundle(sphere3, laplace)


@pytest.fixture(scope="session")
def jump4(sphere4, laplace):
    return _jump_bundle(sphere4, laplace)
