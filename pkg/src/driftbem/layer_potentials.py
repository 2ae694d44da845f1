"""Discrete single-layer operators for the drift kernel on triangulated boundaries.

Collocation (Nystrom) at panel quadrature nodes.  Weakly singular and
near-singular panel integrals run through one quadrature engine: the panel is
split at the in-plane projection of the target into three signed apex
triangles, each mapped by a Duffy transform whose radial variable is
geometrically graded down to the target distance.  The principal-value
tangential gradient offers two singular rules: "kernel-split" (drift-free part
in angular closed form on the flat self panel via odd-symmetry cancellation,
integrable remainder by Duffy) and "duffy" (polar rule on the full kernel with
the logarithmic terms cancelling across opposite directions).  One-sided
conormal derivatives come from offset evaluations with Richardson
extrapolation.  The reversed-drift boundary matrix is the weight-conjugated
transpose of the direct matrix (kernel symmetry Gamma_t(x,y) = Gamma(y,x));
an independent reversed-drift evaluator is kept for off-boundary points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from driftbem.geometry import BoundaryMesh
from driftbem.kernels import (
    Coefficients,
    fundamental_solution,
    fundamental_solution_gradient,
    fundamental_solution_with_gradient,
)

SPACES = ("L2", "W12", "W-12")
SINGULAR_RULES = ("duffy", "kernel-split")

# panels closer than NEAR_FACTOR * diameter get fully graded quadrature; the
# ring out to MEDIUM_FACTOR * diameter gets a lighter upgrade (the plain
# one-point rule on the 1/r^2 kernels leaves O((diam/dist)^2) per panel,
# which summed over the second ring would dominate conormal accuracy)
NEAR_FACTOR = 0.9
MEDIUM_FACTOR = 2.5
# graded-quadrature orders (n_u, n_t, n_int) per relative-distance bin
ULTRA_ORDERS = (10, 8, 9)
FINE_ORDERS = (6, 6, 7)
MEDIUM_ORDERS = (4, 4, 3)
# one-sided conormal offsets, as fractions of the local panel diameter
CONORMAL_OFFSETS = (2.0 ** -3, 2.0 ** -4, 2.0 ** -5)


@dataclass
class BoundaryField:
    """Values (and optionally tangent-frame gradients) at mesh quadrature nodes.

    A field without ``tangential_gradient`` doubles as plain square-integrable
    data; with it, the pair (values, gradient) carries first-order content.
    ``flags`` marks nodes whose values came from a degraded evaluation path.
    """

    values: np.ndarray
    tangential_gradient: np.ndarray | None = None   # (N,2) in the panel frames
    mesh: BoundaryMesh | None = None
    flags: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.tangential_gradient is not None:
            self.tangential_gradient = np.asarray(self.tangential_gradient, dtype=float)
            if self.tangential_gradient.shape != (len(self.values), 2):
                raise ValueError("tangential_gradient must be (n_nodes, 2) in the panel frame")
        if self.mesh is not None and len(self.values) != self.mesh.n_nodes:
            raise ValueError("field length does not match mesh node count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


@dataclass
class DiscreteOperator:
    """Dense collocation matrix with space tags and quadrature metadata."""

    matrix: np.ndarray
    domain_space: str
    range_space: str
    quadrature_order: str
    singular_rule: str

    def __post_init__(self):
        if self.domain_space not in SPACES or self.range_space not in SPACES:
            raise ValueError(f"spaces must be one of {SPACES}")
        if self.singular_rule not in SINGULAR_RULES:
            raise ValueError(f"singular rule must be one of {SINGULAR_RULES}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("operator matrix contains non-finite entries")

    def dump(self, path) -> None:
        """Binary dump: one JSON header line, then row-major float64 payload."""
        header = {
            "rows": int(self.matrix.shape[0]),
            "cols": int(self.matrix.shape[1]),
            "dtype": "float64",
            "order": "row-major",
            "domain_space": self.domain_space,
            "range_space": self.range_space,
            "quadrature_order": self.quadrature_order,
            "singular_rule": self.singular_rule,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())


def load_operator_dump(path):
    """Inverse of DiscreteOperator.dump; returns (header dict, matrix)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = np.frombuffer(fh.read(), dtype="<f8")
    mat = payload.reshape(header["rows"], header["cols"]).copy()
    return header, mat


# ---------------------------------------------------------------------------
# quadrature building blocks
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _apex_duffy(apexes, corners, u_min=None, n_u=6, n_t=6, n_int=6):
    """Graded Duffy quadrature on triangles split at per-panel apex points.

    apexes: (K,3) in-plane points (inside or outside the triangles); corners:
    (K,3,3).  Each triangle is covered by the three signed apex triangles
    (apex, v_i, v_{i+1}); when the apex leaves the triangle the signed
    jacobians still tile it exactly.  The Duffy radial variable is
    geometrically graded from per-pair u_min so integrands peaked near the
    apex at that relative scale are resolved; u_min=None uses one ungraded
    interval, enough once the Duffy jacobian makes the integrand bounded.
    Returns points (K,Q,3) and signed weights (K,Q) summing to the areas.
    """
    apexes = np.asarray(apexes, dtype=float)
    K = len(apexes)
    ux, uw = _gauss01(n_u)
    tx, tw = _gauss01(n_t)
    if u_min is None:
        knots = np.tile(np.array([0.0, 1.0]), (K, 1))
    else:
        u0 = np.clip(np.asarray(u_min, dtype=float), 1e-7, 0.45)
        ratio = (1.0 / u0) ** (1.0 / (n_int - 1))
        geo = u0[:, None] * ratio[:, None] ** np.arange(n_int)[None, :]
        knots = np.concatenate([np.zeros((K, 1)), geo], axis=1)
        knots[:, -1] = 1.0
    lo = knots[:, :-1][:, :, None]
    du = (knots[:, 1:] - knots[:, :-1])[:, :, None]
    u = (lo + du * ux[None, None, :]).reshape(K, -1)            # (K, n_iv*n_u)
    w_u = (du * uw[None, None, :]).reshape(K, -1)

    v = [corners[:, 0], corners[:, 1], corners[:, 2]]
    normal = np.cross(v[1] - v[0], v[2] - v[0])
    area2 = np.linalg.norm(normal, axis=1, keepdims=True)
    normal = normal / np.where(area2 == 0, 1, area2)
    pts_all, wts_all = [], []
    for k in range(3):
        ea = v[k] - apexes
        eb = v[(k + 1) % 3] - apexes
        signed = np.einsum("kj,kj->k", np.cross(ea, eb), normal)    # signed 2*area
        # q = apex + u*((1-t) ea + t eb);  dq/du x dq/dt = u (ea x eb), and
        # sum u w_u = 1/2 supplies the triangle-area normalization
        mix = (1 - tx)[None, :, None] * ea[:, None, :] + tx[None, :, None] * eb[:, None, :]
        q = apexes[:, None, None, :] + u[:, :, None, None] * mix[:, None, :, :]
        jac = (u * w_u)[:, :, None] * tw[None, None, :] * signed[:, None, None]
        pts_all.append(q.reshape(K, -1, 3))
        wts_all.append(jac.reshape(K, -1))
    return np.concatenate(pts_all, axis=1), np.concatenate(wts_all, axis=1)


def _closest_point_paired(p, a, b, c):
    """Closest points on triangles (a,b,c) to paired query points p; all (K,3)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("kj,kj->k", ab, ap)
    d2 = np.einsum("kj,kj->k", ac, ap)
    bp = p - b
    d3 = np.einsum("kj,kj->k", ab, bp)
    d4 = np.einsum("kj,kj->k", ac, bp)
    cp = p - c
    d5 = np.einsum("kj,kj->k", ab, cp)
    d6 = np.einsum("kj,kj->k", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = np.where(va + vb + vc == 0, 1.0, va + vb + vc)
    out = a + (vb / denom)[:, None] * ab + (vc / denom)[:, None] * ac   # face region
    # edge and vertex regions override the face projection
    t_ab = np.clip(d1 / np.where(d1 - d3 == 0, 1, d1 - d3), 0, 1)
    t_ac = np.clip(d2 / np.where(d2 - d6 == 0, 1, d2 - d6), 0, 1)
    den_bc = (d4 - d3) + (d5 - d6)
    t_bc = np.clip((d4 - d3) / np.where(den_bc == 0, 1, den_bc), 0, 1)
    out = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[:, None], a + t_ab[:, None] * ab, out)
    out = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[:, None], a + t_ac[:, None] * ac, out)
    out = np.where(((va <= 0) & (d4 >= d3) & (d5 >= d6))[:, None],
                   b + t_bc[:, None] * (c - b), out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    return out


# ---------------------------------------------------------------------------
# kernel helpers (reversed drift goes through Coefficients.adjoint(), an
# independent evaluation path sharing only the closed-form formula)
# ---------------------------------------------------------------------------

def _gamma0(coeffs, x, q):
    delta = np.asarray(x, dtype=float) - np.asarray(q, dtype=float)
    dt = delta @ coeffs.A_inv_sqrt
    rt = np.sqrt(np.sum(dt * dt, axis=-1))
    return coeffs.det_inv_sqrt / (4.0 * np.pi * rt)


def _grad_gamma0(coeffs, x, q):
    delta = np.asarray(x, dtype=float) - np.asarray(q, dtype=float)
    dt = delta @ coeffs.A_inv_sqrt
    rt2 = np.sum(dt * dt, axis=-1)[..., None]
    g0 = coeffs.det_inv_sqrt / (4.0 * np.pi * np.sqrt(rt2))
    return -(g0 / rt2) * (dt @ coeffs.A_inv_sqrt)


# ---------------------------------------------------------------------------
# nodal basis bookkeeping
# ---------------------------------------------------------------------------

def _nodes_per_panel(mesh: BoundaryMesh) -> int:
    return mesh.n_nodes // mesh.n_panels


def _node_ids_of_panel(mesh: BoundaryMesh, panel_ids):
    m = _nodes_per_panel(mesh)
    return np.asarray(panel_ids)[:, None] * m + np.arange(m)[None, :]


def _panel_linear_shape(mesh: BoundaryMesh, panel_ids, pts):
    """Nodal interpolation weights at points pts (K,Q,3) on panels (K,).

    Centroid rule: piecewise-constant densities, weight 1.  3-point rule: the
    unique linear extension of the three node values.
    """
    m = _nodes_per_panel(mesh)
    if m == 1:
        return np.ones(pts.shape[:2] + (1,))
    tv = mesh.vertices[mesh.panels[panel_ids]]
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
    n = np.cross(b - a, c - a)
    den = np.einsum("kj,kj->k", n, n)[:, None]
    l1 = np.einsum("kj,kqj->kq", n, np.cross(b[:, None] - pts, c[:, None] - pts)) / den
    l2 = np.einsum("kj,kqj->kq", n, np.cross(c[:, None] - pts, a[:, None] - pts)) / den
    lam = np.stack([l1, l2, 1.0 - l1 - l2], axis=2)             # barycentric (K,Q,3)
    # nodes sit at barycentric rows B; linear density values = lam @ B^{-T}
    B = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    return np.einsum("kqa,ma->kqm", lam, np.linalg.inv(B))


def _linear_basis_at_nodes(mesh: BoundaryMesh, node_ids):
    """Basis values and in-plane gradients of the panel density at its nodes."""
    m = _nodes_per_panel(mesh)
    K = len(node_ids)
    panel_ids = mesh.node_panel[node_ids]
    if m == 1:
        return np.ones((K, 1)), np.zeros((K, 1, 3))
    p = mesh.nodes[node_ids]
    lam = _panel_linear_shape(mesh, panel_ids, p[:, None, :])[:, 0, :]
    # gradients of affine basis functions: central differences in the frame
    # are exact for linear functions
    t1 = mesh.tangent_frame[panel_ids][:, 0, :]
    t2 = mesh.tangent_frame[panel_ids][:, 1, :]
    h = (mesh.diameters[panel_ids] * 1e-3)[:, None]
    grads = np.zeros((K, m, 3))
    for tdir in (t1, t2):
        lp = _panel_linear_shape(mesh, panel_ids, (p + h * tdir)[:, None, :])[:, 0, :]
        lm = _panel_linear_shape(mesh, panel_ids, (p - h * tdir)[:, None, :])[:, 0, :]
        grads += ((lp - lm) / (2 * h))[:, :, None] * tdir[:, None, :]
    return lam, grads


# ---------------------------------------------------------------------------
# far-field assembly and the near-field correction engine
# ---------------------------------------------------------------------------

def _far_matrix(mesh, coeffs, kind, block=512):
    """Plain-rule collocation entries w_j k(p_i, q_j), diagonal zeroed.

    kind: "value" for Gamma; ("tangential", a) for <t_a(p_i), grad_x Gamma>;
    "conormal" for <A nu(p_i), grad_x Gamma>.
    """
    nodes = mesh.nodes
    N = mesh.n_nodes
    out = np.empty((N, N))
    for s in range(0, N, block):
        e = min(s + block, N)
        x = nodes[s:e][:, None, :]
        Q = np.broadcast_to(nodes[None, :, :], (e - s, N, 3)).copy()
        rows = np.arange(e - s)
        # displace coincident source points; those entries are zeroed below
        Q[rows, s + rows] += mesh.node_normals[s:e] * mesh.node_diameters[s:e][:, None]
        if kind == "value":
            vals = fundamental_solution(coeffs, x, Q)
        else:
            g = fundamental_solution_gradient(coeffs, x, Q)
            if kind == "conormal":
                t = mesh.node_normals[s:e] @ coeffs.A
            else:
                t = mesh.node_tangent_frame[s:e][:, kind[1], :]
            vals = np.einsum("mj,mnj->mn", t, g)
        vals[rows, s + rows] = 0.0
        out[s:e] = vals
    return out * mesh.weights[None, :]


def _near_pairs(mesh, points, factor=MEDIUM_FACTOR):
    """(point index, panel, distance) for panels within factor * diameter."""
    M = len(points)
    pi, pp, dd = [], [], []
    chunk = max(1, int(2e7 / max(mesh.n_panels, 1)))
    for s in range(0, M, chunk):
        x = points[s:s + chunk]
        d_ctr = np.linalg.norm(x[:, None, :] - mesh.centroids[None, :, :], axis=2)
        ii, jj = np.nonzero(d_ctr < (factor + 0.8) * mesh.diameters[None, :])
        if len(ii) == 0:
            continue
        tv = mesh.vertices[mesh.panels[jj]]
        cl = _closest_point_paired(x[ii], tv[:, 0], tv[:, 1], tv[:, 2])
        dist = np.linalg.norm(cl - x[ii], axis=1)
        keep = dist < factor * mesh.diameters[jj]
        pi.extend((s + ii[keep]).tolist())
        pp.extend(jj[keep].tolist())
        dd.extend(dist[keep].tolist())
    return np.array(pi, dtype=int), np.array(pp, dtype=int), np.array(dd)


def _pair_correction(mesh, targets, panel_ids, integrand, grade=True,
                     n_u=6, n_t=6, n_int=7, batch=4096):
    """Accurate integrals int_P k(x,q) l_m(q) dsigma for paired (target, panel).

    integrand(x (B,1,3), q (B,Q,3), sel) -> (B,Q) or multi-channel (B,Q,C)
    where sel slices the pair arrays down to the current batch.  Targets may
    sit on their panels (apex Duffy handles the weak singularity) or off them
    (grading resolves the near peak).  Returns (K, m) contributions per panel
    node, or (K, m, C) for multi-channel integrands.
    """
    K = len(panel_ids)
    m = _nodes_per_panel(mesh)
    out = None
    for s in range(0, K, batch):
        sel = slice(s, min(s + batch, K))
        pp = panel_ids[sel]
        x = targets[sel]
        tv = mesh.vertices[mesh.panels[pp]]
        # apex at the closest panel point, not the free plane projection: when
        # the projection exits the panel the integrand peaks along the nearest
        # edge, which radial grading around an off-panel apex cannot resolve
        apex = _closest_point_paired(x, tv[:, 0], tv[:, 1], tv[:, 2])
        if grade:
            dist = np.linalg.norm(apex - x, axis=1)
            u_min = dist / (2.0 * mesh.diameters[pp])
        else:
            u_min = None
        pts, wts = _apex_duffy(apex, tv, u_min=u_min, n_u=n_u, n_t=n_t, n_int=n_int)
        vals = integrand(x[:, None, :], pts, sel)
        shp = _panel_linear_shape(mesh, pp, pts)
        if out is None:
            out = np.zeros((K, m) if vals.ndim == 2 else (K, m, vals.shape[2]))
        if vals.ndim == 2:
            out[sel] = np.einsum("kq,kq,kqm->km", vals, wts, shp)
        else:
            out[sel] = np.einsum("kqc,kq,kqm->kmc", vals, wts, shp)
    return out if out is not None else np.zeros((0, m))


def _binned_correction(mesh, targets, panel_ids, dist, integrand, channels=None):
    """Graded pair quadrature with point counts binned by relative distance.

    integrand(x, q, pos) with pos an index array into the given pair arrays.
    """
    m = _nodes_per_panel(mesh)
    shape = (len(panel_ids), m) if channels is None else (len(panel_ids), m, channels)
    corr = np.zeros(shape)
    rel = dist / mesh.diameters[panel_ids]
    ultra = rel < 0.2
    fine = ~ultra & (rel < NEAR_FACTOR)
    for mask, kw in ((ultra, dict(zip(("n_u", "n_t", "n_int"), ULTRA_ORDERS))),
                     (fine, dict(zip(("n_u", "n_t", "n_int"), FINE_ORDERS))),
                     (~ultra & ~fine, dict(zip(("n_u", "n_t", "n_int"), MEDIUM_ORDERS)))):
        idx = np.where(mask)[0]
        if len(idx):
            corr[idx] = _pair_correction(
                mesh, targets[idx], panel_ids[idx],
                lambda x, q, s, idx=idx: integrand(x, q, idx[s]), **kw)
    return corr


def _plain_pair_entries(mesh, targets, panel_ids, integrand):
    """Plain-rule contributions of the paired panels (to be replaced).

    Coincident target/source points contribute 0, matching the zeroed
    diagonal of the far-field assembly.
    """
    cols = _node_ids_of_panel(mesh, panel_ids)
    x = targets[:, None, :]
    q = mesh.nodes[cols]
    same = np.linalg.norm(q - x, axis=2) < 1e-13 * (1 + np.linalg.norm(x, axis=2))
    qs = np.where(same[:, :, None],
                  q + mesh.node_diameters[cols][:, :, None], q)
    vals = integrand(x, qs, slice(None))
    if vals.ndim == 3:
        vals = np.where(same[:, :, None], 0.0, vals)
        return vals * mesh.weights[cols][:, :, None]
    vals = np.where(same, 0.0, vals)
    return vals * mesh.weights[cols]


# ---------------------------------------------------------------------------
# flat-panel angular moments of the drift-free kernel
# ---------------------------------------------------------------------------

def _self_panel_arcs(mesh, node_ids, n_theta=24):
    """Angular grid over the three vertex-to-vertex arcs around each node.

    Returns (w_theta (K,3,n), omega (K,3,n,3), R (K,3,n)): in-plane unit
    directions and the distance from the node to the panel boundary along
    each.  Within one arc the boundary is a single edge, so every arc
    integrand below is smooth.
    """
    pan = mesh.node_panel[node_ids]
    tv = mesh.vertices[mesh.panels[pan]]
    p = mesh.nodes[node_ids]
    fr = mesh.node_tangent_frame[node_ids]
    t1, t2 = fr[:, 0, :], fr[:, 1, :]
    nu = mesh.node_normals[node_ids]
    rel = tv - p[:, None, :]
    ang = np.arctan2(np.einsum("kvj,kj->kv", rel, t2),
                     np.einsum("kvj,kj->kv", rel, t1))
    order = np.argsort(ang, axis=1)
    ang_s = np.take_along_axis(ang, order, axis=1)
    gx, gw = _gauss01(n_theta)
    K = len(node_ids)
    w_th = np.empty((K, 3, n_theta))
    omega = np.empty((K, 3, n_theta, 3))
    R = np.empty((K, 3, n_theta))
    for arc in range(3):
        th0 = ang_s[:, arc]
        th1 = ang_s[:, (arc + 1) % 3] + (2 * np.pi if arc == 2 else 0.0)
        th = th0[:, None] + (th1 - th0)[:, None] * gx[None, :]
        w_th[:, arc] = (th1 - th0)[:, None] * gw[None, :]
        om = (np.cos(th)[:, :, None] * t1[:, None, :]
              + np.sin(th)[:, :, None] * t2[:, None, :])
        omega[:, arc] = om
        # the arc is bounded by the edge joining its two sorted vertices
        i0 = order[:, arc][:, None, None]
        i1 = order[:, (arc + 1) % 3][:, None, None]
        e0 = np.take_along_axis(rel, np.broadcast_to(i0, (K, 1, 3)), 1)[:, 0]
        e1 = np.take_along_axis(rel, np.broadcast_to(i1, (K, 1, 3)), 1)[:, 0]
        n_e = np.cross(nu, e1 - e0)
        num = np.einsum("kj,kj->k", n_e, e0)[:, None]
        den = np.einsum("kj,kqj->kq", n_e, om)
        R[:, arc] = num / np.where(np.abs(den) < 1e-300, 1.0, den)
    return w_th, omega, np.maximum(R, 0.0)


def _gamma0_flat_moments(mesh, coeffs, node_ids, n_theta=24):
    """Flat-panel moments of the drift-free kernel around each node.

    value  = int_P Gamma0 dsigma              = (D/4pi) int R/|Mw| dth
    first  = int_P Gamma0 (q-p) dsigma        = (D/8pi) int w R^2/|Mw| dth
    pv_a   = PV int_P <t_a, grad_x Gamma0> ds = (D/4pi) int <t_a,A^-1 w>/|Mw|^3 ln R dth
    The pv formula drops the divergent ln(eps) term, whose angular density is
    odd and integrates to zero over the full circle.
    """
    w_th, omega, R = _self_panel_arcs(mesh, node_ids, n_theta)
    D = coeffs.det_inv_sqrt
    Mw = omega @ coeffs.A_inv_sqrt
    nMw = np.linalg.norm(Mw, axis=-1)
    fr = mesh.node_tangent_frame[node_ids]
    val = (D / (4 * np.pi)) * np.sum(w_th * R / nMw, axis=(1, 2))
    first = (D / (8 * np.pi)) * np.einsum("kan,kanj->kj", w_th * R ** 2 / nMw, omega)
    Aw = omega @ coeffs.A_inv
    logR = np.log(np.maximum(R, 1e-300))
    pv = np.empty((len(node_ids), 2))
    for a in (0, 1):
        ga = np.einsum("kj,kanj->kan", fr[:, a, :], Aw) / nMw ** 3
        pv[:, a] = (D / (4 * np.pi)) * np.sum(w_th * ga * logR, axis=(1, 2))
    return val, first, pv


def _polar_pv_full(mesh, coeffs, node_ids, a, n_theta=24, n_r=4, n_int_r=8,
                   batch=512):
    """PV moment of the full tangential-gradient kernel by a polar panel rule.

    Radial integrals use log-graded Gauss panels from r_eps = 1e-7 diam up to
    the boundary distance R(theta); the would-be ln(r_eps) contribution has an
    odd angular density and cancels over the circle, leaving only smooth-arc
    angular quadrature error.
    """
    K = len(node_ids)
    out = np.empty(K)
    gx, gw = _gauss01(n_r)
    for s in range(0, K, batch):
        ids = node_ids[s:s + batch]
        w_th, omega, R = _self_panel_arcs(mesh, ids, n_theta)
        p = mesh.nodes[ids]
        t_a = mesh.node_tangent_frame[ids][:, a, :]
        r_eps = 1e-7 * mesh.node_diameters[ids]
        frac = (R / r_eps[:, None, None]) ** (1.0 / n_int_r)
        acc = np.zeros_like(R)
        lo = np.broadcast_to(r_eps[:, None, None], R.shape).copy()
        for _ in range(n_int_r):
            hi = lo * frac
            r = lo[..., None] + (hi - lo)[..., None] * gx            # (B,3,n,n_r)
            w_r = (hi - lo)[..., None] * gw
            q = p[:, None, None, None, :] + r[..., None] * omega[:, :, :, None, :]
            g = fundamental_solution_gradient(coeffs, p[:, None, None, None, :], q)
            kv = np.einsum("kj,kanrj->kanr", t_a, g)
            acc += np.sum(kv * r * w_r, axis=-1)
            lo = hi
        out[s:s + batch] = np.sum(acc * w_th, axis=(1, 2))
    return out


# ---------------------------------------------------------------------------
# boundary operators
# ---------------------------------------------------------------------------

def single_layer_operator(mesh: BoundaryMesh, coeffs: Coefficients,
                          singular_rule: str = "duffy") -> DiscreteOperator:
    """Discrete single layer: node values of the boundary potential.

    The near-field corrections are applied in adjoint-symmetrized form: half
    the direct correction plus half the weight-conjugated transpose of the
    reversed-drift correction.  Both halves approximate the same entries to
    the same order, and the average makes the discrete operator satisfy the
    kernel-symmetry identities (W S)^T = W S_rev exactly up to rounding -- in
    particular W S is symmetric whenever b = 0.
    """
    if singular_rule not in SINGULAR_RULES:
        raise ValueError(f"singular rule must be one of {SINGULAR_RULES}")
    S = _far_matrix(mesh, coeffs, "value")
    pi, pp, dist = _near_pairs(mesh, mesh.nodes)
    own = pp == mesh.node_panel[pi]
    targets = mesh.nodes[pi]
    sel = np.where(own)[0]
    oth = np.where(~own)[0]

    def deltas(cf):
        kern = lambda x, q, pos: fundamental_solution(cf, x, q)
        plain = _plain_pair_entries(mesh, targets, pp, kern)
        corr = np.zeros_like(plain)
        corr[oth] = _binned_correction(mesh, targets[oth], pp[oth], dist[oth], kern)
        if singular_rule == "duffy":
            corr[sel] = _pair_correction(mesh, targets[sel], pp[sel], kern,
                                         grade=False, n_u=10, n_t=8)
        else:
            # kernel split: angular closed form for the flat-panel moments of
            # the drift-free part, Duffy only for the bounded remainder
            diff = lambda x, q, pos: (fundamental_solution(cf, x, q)
                                      - _gamma0(cf, x, q))
            corr[sel] = _pair_correction(mesh, targets[sel], pp[sel], diff,
                                         grade=False, n_u=10, n_t=8)
            val0, first0, _ = _gamma0_flat_moments(mesh, cf, pi[sel])
            lam, grads = _linear_basis_at_nodes(mesh, pi[sel])
            corr[sel] += lam * val0[:, None] + np.einsum("kmj,kj->km", grads, first0)
        return corr - plain

    d_dir = deltas(coeffs)
    d_rev = d_dir if np.all(coeffs.b == 0.0) else deltas(coeffs.adjoint())
    cols = _node_ids_of_panel(mesh, pp)
    rows = np.broadcast_to(pi[:, None], cols.shape)
    w = mesh.weights
    np.add.at(S, (rows, cols), 0.5 * d_dir)
    np.add.at(S, (cols, rows), 0.5 * d_rev * (w[rows] / w[cols]))
    return DiscreteOperator(matrix=S, domain_space="L2", range_space="W12",
                            quadrature_order=mesh.rule, singular_rule=singular_rule)


def tangential_gradient_operator(mesh: BoundaryMesh, coeffs: Coefficients,
                                 singular_rule: str = "kernel-split"):
    """Discrete PV tangential gradient of the single layer: [T_1, T_2]."""
    if singular_rule not in SINGULAR_RULES:
        raise ValueError(f"singular rule must be one of {SINGULAR_RULES}")
    pi, pp, dist = _near_pairs(mesh, mesh.nodes)
    own = pp == mesh.node_panel[pi]
    targets = mesh.nodes[pi]
    sel = np.where(own)[0]
    self_ids = pi[sel]
    oth = np.where(~own)[0]
    oth_ids = pi[oth]
    lam, _ = _linear_basis_at_nodes(mesh, self_ids)
    if singular_rule == "kernel-split":
        _, _, pv0 = _gamma0_flat_moments(mesh, coeffs, self_ids)
    m = _nodes_per_panel(mesh)
    cols = _node_ids_of_panel(mesh, pp)
    rows = np.broadcast_to(pi[:, None], cols.shape)
    ops = []
    for a in (0, 1):
        T = _far_matrix(mesh, coeffs, ("tangential", a))

        def dot_frame(ids, x, q, grad_fn):
            g = grad_fn(coeffs, x, q)
            t = mesh.node_tangent_frame[ids][:, a, :]
            return np.einsum("kj,kqj->kq", t, g)

        plain = _plain_pair_entries(
            mesh, targets, pp,
            lambda x, q, pos: dot_frame(pi[pos], x, q, fundamental_solution_gradient))
        corr = np.zeros_like(plain)
        corr[oth] = _binned_correction(
            mesh, targets[oth], pp[oth], dist[oth],
            lambda x, q, pos: dot_frame(oth_ids[pos], x, q, fundamental_solution_gradient))
        if singular_rule == "kernel-split":
            # integrable remainder by Duffy; flat-panel PV of the drift-free
            # part from the angular log formula
            corr[sel] = _pair_correction(
                mesh, targets[sel], pp[sel],
                lambda x, q, s: dot_frame(
                    self_ids[s], x, q,
                    lambda c, xx, qq: fundamental_solution_gradient(c, xx, qq)
                    - _grad_gamma0(c, xx, qq)),
                grade=False, n_u=10, n_t=8)
            corr[sel] += lam * pv0[:, a][:, None]
            if m > 1:
                corr[sel] += _density_variation(
                    mesh, self_ids,
                    lambda x, q, s: dot_frame(self_ids[s], x, q, _grad_gamma0))
        else:
            # duffy strategy: polar rule on the full kernel for the PV moment;
            # the density-variation integrand k (l_m - l_m(p)) is integrable
            mom = _polar_pv_full(mesh, coeffs, self_ids, a)
            corr[sel] = lam * mom[:, None]
            if m > 1:
                corr[sel] += _density_variation(
                    mesh, self_ids,
                    lambda x, q, s: dot_frame(self_ids[s], x, q,
                                              fundamental_solution_gradient))
        np.add.at(T, (rows, cols), corr - plain)
        ops.append(DiscreteOperator(matrix=T, domain_space="L2", range_space="L2",
                                    quadrature_order=mesh.rule,
                                    singular_rule=singular_rule))
    return ops


def _density_variation(mesh, node_ids, kernel, n_u=10, n_t=8):
    """int_P k(p,q) (l_m(q) - l_m(p)) dsigma by Duffy; the integrand is O(1/r)."""
    panel_ids = mesh.node_panel[node_ids]
    tv = mesh.vertices[mesh.panels[panel_ids]]
    p = mesh.nodes[node_ids]
    pts, wts = _apex_duffy(p, tv, u_min=None, n_u=n_u, n_t=n_t)
    vals = kernel(p[:, None, :], pts, slice(None))
    shp = _panel_linear_shape(mesh, panel_ids, pts)
    lam, _ = _linear_basis_at_nodes(mesh, node_ids)
    return np.einsum("kq,kq,kqm->km", vals, wts, shp - lam[:, None, :])


def adjoint_single_layer_operator(mesh: BoundaryMesh, coeffs: Coefficients,
                                  direct: DiscreteOperator | None = None,
                                  singular_rule: str = "duffy") -> DiscreteOperator:
    """Boundary matrix of the reversed-drift single layer.

    The kernel symmetry Gamma_t(x,y) = Gamma(y,x) makes the reversed-drift
    collocation matrix the weight-conjugated transpose of the direct one,
    which is exactly how it is constructed: entry [i,j] = w_j S[j,i] / w_i.
    """
    if direct is None:
        direct = single_layer_operator(mesh, coeffs, singular_rule)
    w = mesh.weights
    mat = (direct.matrix.T * w[None, :]) / w[:, None]
    return DiscreteOperator(matrix=np.ascontiguousarray(mat),
                            domain_space="L2", range_space="W12",
                            quadrature_order=direct.quadrature_order,
                            singular_rule=direct.singular_rule)


def apply_adjoint_sstar(mesh: BoundaryMesh, H: BoundaryField,
                        S_op: DiscreteOperator, T_ops=None) -> np.ndarray:
    """L^2 representative of the first-order adjoint applied to H.

    For H carrying only values h the functional is the plain L^2 pairing (the
    canonical embedding of square-integrable data) and the result is
    W^{-1} S^T W h; a tangential gradient adds the transposed gradient blocks.
    Discrete adjointness <Sf, H>_{W^{1,2}} = <f, S*H>_{L^2} holds exactly by
    construction.
    """
    w = mesh.weights
    out = S_op.matrix.T @ (w * H.values)
    if H.tangential_gradient is not None:
        if T_ops is None:
            raise ValueError("H carries a gradient; tangential operators are required")
        for a in (0, 1):
            out += T_ops[a].matrix.T @ (w * H.tangential_gradient[:, a])
    return out / w


# ---------------------------------------------------------------------------
# off-boundary evaluation with near-panel upgrades
# ---------------------------------------------------------------------------

def offboundary_potential(mesh: BoundaryMesh, coeffs: Coefficients, density,
                          points, gradient: bool = False, kernel: str = "direct",
                          block=256):
    """Layer potential (and optionally its gradient) at off-boundary points.

    kernel="adjoint" evaluates the reversed-drift potential through its own
    coefficient set.  Panels closer than MEDIUM_FACTOR times their diameter
    are re-integrated with distance-graded apex quadrature.  density may be a
    single vector (N,) or a family (N,F): the near-field corrections are
    density-independent, so whole families cost one correction pass.
    """
    cf = coeffs if kernel == "direct" else coeffs.adjoint()
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dens = np.asarray(density, dtype=float)
    single = dens.ndim == 1
    dens2 = dens[:, None] if single else dens
    M = len(points)
    F = dens2.shape[1]
    vals = np.empty((M, F))
    grads = np.empty((M, 3, F)) if gradient else None
    wf = mesh.weights[:, None] * dens2
    for s in range(0, M, block):
        x = points[s:s + block][:, None, :]
        if gradient:
            g0, gg = fundamental_solution_with_gradient(cf, x,
                                                        mesh.nodes[None, :, :])
            vals[s:s + block] = g0 @ wf
            grads[s:s + block] = np.einsum("mnj,nf->mjf", gg, wf)
        else:
            vals[s:s + block] = \
                fundamental_solution(cf, x, mesh.nodes[None, :, :]) @ wf
    pi, pp, dist = _near_pairs(mesh, points)
    if len(pi):
        cols = _node_ids_of_panel(mesh, pp)
        node_dens = dens2[cols]                                  # (K,m,F)
        if gradient:
            # one 4-channel pass (value + 3 gradient components) over the
            # shared quadrature geometry instead of four scalar passes
            def kern4(x, q, pos):
                g0, gg = fundamental_solution_with_gradient(cf, x, q)
                return np.concatenate([g0[..., None], gg], axis=-1)
            plain = _plain_pair_entries(mesh, points[pi], pp, kern4)
            corr = _binned_correction(mesh, points[pi], pp, dist, kern4,
                                      channels=4)
            upd = np.einsum("kmc,kmf->kcf", corr - plain, node_dens)
            np.add.at(vals, pi, upd[:, 0])
            np.add.at(grads, pi, upd[:, 1:])
        else:
            kern_v = lambda x, q, pos: fundamental_solution(cf, x, q)
            plain_v = _plain_pair_entries(mesh, points[pi], pp, kern_v)
            corr_v = _binned_correction(mesh, points[pi], pp, dist, kern_v)
            np.add.at(vals, pi,
                      np.einsum("km,kmf->kf", corr_v - plain_v, node_dens))
    if single:
        vals = vals[:, 0]
        grads = grads[..., 0] if gradient else None
    return (vals, grads) if gradient else vals


def single_layer_boundary(mesh: BoundaryMesh, coeffs: Coefficients, density,
                          singular_rule: str = "duffy",
                          operators=None) -> BoundaryField:
    """Boundary trace of the single layer with its PV tangential gradient."""
    if operators is None:
        S = single_layer_operator(mesh, coeffs, singular_rule)
        T = tangential_gradient_operator(mesh, coeffs, "kernel-split")
    else:
        S, T = operators[0], operators[1:]
    dens = np.asarray(density, dtype=float)
    tg = np.stack([T[0].matrix @ dens, T[1].matrix @ dens], axis=1)
    return BoundaryField(values=S.matrix @ dens, tangential_gradient=tg, mesh=mesh)


def tangential_gradient_S(mesh: BoundaryMesh, coeffs: Coefficients, density,
                          strategy: str = "kernel-split") -> np.ndarray:
    """PV tangential gradient of the single layer, (N,2) in the panel frames."""
    T = tangential_gradient_operator(mesh, coeffs, strategy)
    dens = np.asarray(density, dtype=float)
    return np.stack([T[0].matrix @ dens, T[1].matrix @ dens], axis=1)


# ---------------------------------------------------------------------------
# one-sided conormal derivative and the PV conormal operator
# ---------------------------------------------------------------------------

def conormal_onesided(mesh: BoundaryMesh, coeffs: Coefficients, density,
                      side: str = "interior", kernel: str = "direct",
                      node_ids=None, extrapolate: bool = True):
    """One-sided conormal derivative <A grad u, nu> of the layer potential.

    Gradients at offsets p -/+ h nu(p), h in CONORMAL_OFFSETS times the panel
    diameter, are extrapolated to h -> 0 by the quadratic Richardson rule
    (v(4s) - 6 v(2s) + 8 v(s)) / 3.  Nodes whose offsets land on the wrong
    side of the boundary are flagged and keep the smallest-h value.

    A single density (N,) returns a BoundaryField; a family (N,F) returns a
    (values (N,F), flags (N,)) pair, evaluated through one shared pass of the
    near-field machinery.  node_ids restricts evaluation to a node subset (a
    cheap option on fine meshes) and always returns the (values, flags) pair.
    extrapolate=False skips the Richardson step and returns the raw per-offset
    values, shape (..., len(CONORMAL_OFFSETS)), useful for convergence studies
    where the extrapolated value is accurate enough to hide refinement trends.
    """
    if side not in ("interior", "exterior"):
        raise ValueError("side must be 'interior' or 'exterior'")
    dens = np.asarray(density, dtype=float)
    single = dens.ndim == 1
    dens2 = dens[:, None] if single else dens
    sgn = -1.0 if side == "interior" else 1.0
    ids = np.arange(mesh.n_nodes) if node_ids is None else \
        np.asarray(node_ids, dtype=int)
    nu = mesh.node_normals[ids]
    diam = mesh.node_diameters[ids]
    base = mesh.nodes[ids]
    vals_h = []
    ok = np.ones(len(ids), dtype=bool)
    for frac in CONORMAL_OFFSETS:
        pts = base + sgn * frac * diam[:, None] * nu
        inside = mesh.contains(pts)
        ok &= inside if side == "interior" else ~inside
        _, g = offboundary_potential(mesh, coeffs, dens2, pts,
                                     gradient=True, kernel=kernel)
        Anu = nu @ coeffs.A
        vals_h.append(np.einsum("nj,njf->nf", Anu, g))
    if not extrapolate:
        raw = np.stack(vals_h, axis=-1)
        return (raw[:, 0] if single else raw), ~ok
    v = (vals_h[0] - 6.0 * vals_h[1] + 8.0 * vals_h[2]) / 3.0
    v = np.where(ok[:, None], v, vals_h[2])
    if node_ids is not None:
        return (v[:, 0], ~ok) if single else (v, ~ok)
    if single:
        return BoundaryField(values=v[:, 0], mesh=mesh, flags=~ok)
    return v, ~ok


def pv_conormal_operator(mesh: BoundaryMesh, coeffs: Coefficients) -> DiscreteOperator:
    """PV operator <A grad_p S f(p), nu(p)> (the conormal average across the jump).

    On the flat self panel the drift-free part of the kernel is exactly
    tangential (A A^{-1} (p-q) is in-plane), so only the integrable drift
    remainder needs a Duffy correction there; for linear densities the
    drift-free variation integral survives and is added separately.
    """
    out = _far_matrix(mesh, coeffs, "conormal")
    pi, pp, dist = _near_pairs(mesh, mesh.nodes)
    own = pp == mesh.node_panel[pi]
    targets = mesh.nodes[pi]

    def kern(ids, x, q, grad_fn):
        g = grad_fn(coeffs, x, q)
        Anu = mesh.node_normals[ids] @ coeffs.A
        return np.einsum("kj,kqj->kq", Anu, g)

    plain = _plain_pair_entries(mesh, targets, pp,
                                lambda x, q, pos: kern(pi[pos], x, q,
                                                       fundamental_solution_gradient))
    corr = np.zeros_like(plain)
    oth = np.where(~own)[0]
    oth_ids = pi[oth]
    corr[oth] = _binned_correction(mesh, targets[oth], pp[oth], dist[oth],
                                   lambda x, q, pos: kern(oth_ids[pos], x, q,
                                                          fundamental_solution_gradient))
    sel = np.where(own)[0]
    corr[sel] = _pair_correction(
        mesh, targets[sel], pp[sel],
        lambda x, q, s: kern(pi[sel][s], x, q,
                             lambda c, xx, qq: fundamental_solution_gradient(c, xx, qq)
                             - _grad_gamma0(c, xx, qq)),
        grade=False, n_u=10, n_t=8)
    if _nodes_per_panel(mesh) > 1:
        corr[sel] += _density_variation(
            mesh, pi[sel],
            lambda x, q, s: kern(pi[sel][s], x, q, _grad_gamma0))
    cols = _node_ids_of_panel(mesh, pp)
    rows = np.broadcast_to(pi[:, None], cols.shape)
    np.add.at(out, (rows, cols), corr - plain)
    return DiscreteOperator(matrix=out, domain_space="L2", range_space="L2",
                            quadrature_order=mesh.rule, singular_rule="kernel-split")


def pv_truncation_sups(mesh: BoundaryMesh, coeffs: Coefficients, density,
                       eps_factors=(4.0, 2.0, 1.0, 0.5, 0.25)) -> np.ndarray:
    """Node-wise sup over truncation radii of the PV partial sums, (N, 2).

    Plain quadrature restricted to nodes with |q - p| > eps for eps = factor
    times the local panel diameter; node-wise boundedness of these sups in
    terms of the density norm and the full PV value is the practical form of
    the maximal-truncation estimate.
    """
    dens = np.asarray(density, dtype=float)
    wf = mesh.weights * dens
    sups = np.zeros((mesh.n_nodes, 2))
    for fac in eps_factors:
        for s in range(0, mesh.n_nodes, 512):
            e = min(s + 512, mesh.n_nodes)
            x = mesh.nodes[s:e][:, None, :]
            d = np.linalg.norm(mesh.nodes[None, :, :] - x, axis=2)
            mask = d > fac * mesh.node_diameters[s:e][:, None]
            Q = np.where(mask[:, :, None], mesh.nodes[None, :, :],
                         x + mesh.node_diameters[s:e][:, None, None])
            g = fundamental_solution_gradient(coeffs, x, Q)
            fr = mesh.node_tangent_frame[s:e]
            for a in (0, 1):
                ta = np.einsum("mj,mnj->mn", fr[:, a, :], g)
                vals = np.abs((ta * mask) @ wf)
                sups[s:e, a] = np.maximum(sups[s:e, a], vals)
    return sups


# ---------------------------------------------------------------------------
# inner products and empirical operator norms
# ---------------------------------------------------------------------------

def l2_inner(mesh: BoundaryMesh, u, v) -> float:
    return float(np.sum(mesh.weights * np.asarray(u) * np.asarray(v)))


def w12_inner(mesh: BoundaryMesh, F: BoundaryField, H: BoundaryField) -> float:
    out = l2_inner(mesh, F.values, H.values)
    if F.tangential_gradient is not None and H.tangential_gradient is not None:
        out += float(np.sum(mesh.weights[:, None] * F.tangential_gradient
                            * H.tangential_gradient))
    return out


def single_layer_norm(mesh: BoundaryMesh, S_op: DiscreteOperator, T_ops,
                      n_iter: int = 40, seed: int = 7) -> float:
    """Empirical L^2 -> W^{1,2} operator norm by power iteration on the Gram map."""
    w = mesh.weights
    mats = [S_op.matrix] + [T.matrix for T in T_ops]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mesh.n_nodes)
    v /= np.sqrt(l2_inner(mesh, v, v))
    lam = 0.0
    for _ in range(n_iter):
        y = np.zeros_like(v)
        for M in mats:
            y += M.T @ (w * (M @ v))
        y /= w
        lam = l2_inner(mesh, v, y)
        nrm = np.sqrt(l2_inner(mesh, y, y))
        if nrm == 0:
            return 0.0
        v = y / nrm
    return float(np.sqrt(max(lam, 0.0)))
