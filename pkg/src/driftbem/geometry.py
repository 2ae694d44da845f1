"""Triangulated boundary meshes for star-shaped Lipschitz polyhedra.

Meshes are flat-panel triangulations carrying per-panel quadrature nodes.
Built-in domain kinds: a geodesic sphere approximation, an axis-aligned cube,
an L-shaped prism, and explicit vertex/face lists.  The module also provides
the geometric constructions used by the solvers and checks: corkscrew points,
surface balls, nontangential cone sample sets, and point-to-boundary
distance/containment queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VALID_KINDS = ("sphere-approximation", "cube", "l-prism", "explicit")
MAX_LEVEL = 6

# Module constant for corkscrew points: dist(A_r(q), boundary) >= r / C0.
# A cube corner forces C0 >= 2*sqrt(3) ~ 3.46; 4 leaves headroom.
CORKSCREW_C0 = 4.0


class MeshError(ValueError):
    """Raised for invalid domain specs or broken face lists."""


@dataclass(frozen=True)
class DomainSpec:
    """Description of a domain to be meshed.

    kind: one of 'sphere-approximation', 'cube', 'l-prism', 'explicit'.
    scale: sphere radius, cube side length, or L-prism long-leg length.
    level: number of 4-to-1 refinement passes applied to the base mesh (0..6).
    vertices/faces: only for kind='explicit'.
    interior_point: star center; defaults per kind (centroid for explicit).
    """

    kind: str
    scale: float = 1.0
    level: int = 0
    vertices: np.ndarray | None = None
    faces: np.ndarray | None = None
    interior_point: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise MeshError(f"unknown domain kind {self.kind!r}; expected one of {VALID_KINDS}")
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise MeshError(f"scale must be positive and finite, got {self.scale}")
        if not (0 <= int(self.level) <= MAX_LEVEL):
            raise MeshError(f"refinement level must be in 0..{MAX_LEVEL}, got {self.level}")
        if self.kind == "explicit":
            if self.vertices is None or self.faces is None:
                raise MeshError("explicit domains need both vertices and faces")


# ---------------------------------------------------------------------------
# base meshes
# ---------------------------------------------------------------------------

def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit icosahedron with poles at +-z (12 vertices, 20 faces)."""
    verts = [(0.0, 0.0, 1.0)]
    # two staggered rings of five vertices
    lat = math.atan(0.5)
    for k in range(5):
        lon = 2.0 * math.pi * k / 5.0
        verts.append((math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)))
    for k in range(5):
        lon = 2.0 * math.pi * (k + 0.5) / 5.0
        verts.append((math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), -math.sin(lat)))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    for k in range(5):
        k1 = 1 + k
        k2 = 1 + (k + 1) % 5
        k3 = 6 + k
        k4 = 6 + (k + 1) % 5
        faces.append((0, k1, k2))       # top cap
        faces.append((k1, k3, k2))      # upper band
        faces.append((k2, k3, k4))      # lower band
        faces.append((11, k4, k3))      # bottom cap
    return np.array(verts, dtype=float), np.array(faces, dtype=np.int64)


def _box_quads(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box as 12 outward-oriented triangles."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        (x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
        (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1),
    ])
    quads = [
        (0, 3, 2, 1),  # z = z0, normal -z
        (4, 5, 6, 7),  # z = z1, normal +z
        (0, 1, 5, 4),  # y = y0, normal -y
        (2, 3, 7, 6),  # y = y1, normal +y
        (0, 4, 7, 3),  # x = x0, normal -x
        (1, 2, 6, 5),  # x = x1, normal +x
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return v, np.array(faces, dtype=np.int64)


def _l_prism(scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """L-shaped prism: [0,2]x[0,2]x[0,1] minus (1,2]x(1,2]x[0,1], times scale/2.

    Star-shaped with respect to (0.6, 0.6, 0.5) in canonical coordinates.
    """
    s = scale / 2.0
    # cross-section polygon, counter-clockwise
    poly = np.array([(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)], dtype=float)
    n = len(poly)
    verts = []
    for z in (0.0, 1.0):
        for (x, y) in poly:
            verts.append((x, y, z))
    verts = np.array(verts) * s
    faces = []
    # bottom (z=0): normal -z, clockwise when seen from +z. Fan around the
    # reflex-safe vertex index 0 fails (polygon nonconvex); use explicit ears.
    bottom_tris = [(0, 2, 1), (0, 3, 2), (0, 5, 3), (5, 4, 3)]
    top_tris = [(0, 1, 2), (0, 2, 3), (0, 3, 5), (5, 3, 4)]
    faces.extend(bottom_tris)
    faces.extend([(a + n, b + n, c + n) for (a, b, c) in top_tris])
    for k in range(n):
        a, b = k, (k + 1) % n
        # wall quad (a,b) bottom to top, outward orientation
        faces.append((a, b, b + n))
        faces.append((a, b + n, a + n))
    interior = np.array([0.6, 0.6, 0.5]) * s
    return verts, np.array(faces, dtype=np.int64), interior


def _subdivide(verts: np.ndarray, faces: np.ndarray, project_radius: float | None):
    """One 4-to-1 refinement pass; optionally push new/old vertices to a sphere."""
    verts = list(map(tuple, verts))
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = cache.get(key)
        if idx is not None:
            return idx
        pa, pb = verts[a], verts[b]
        m = tuple(0.5 * (pa[i] + pb[i]) for i in range(3))
        if project_radius is not None:
            nrm = math.sqrt(m[0] ** 2 + m[1] ** 2 + m[2] ** 2)
            m = tuple(c * project_radius / nrm for c in m)
        verts.append(m)
        idx = len(verts) - 1
        cache[key] = idx
        return idx

    new_faces = []
    for (a, b, c) in faces:
        ab = midpoint(a, b)
        bc = midpoint(b, c)
        ca = midpoint(c, a)
        new_faces.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    return np.array(verts, dtype=float), np.array(new_faces, dtype=np.int64)


def _check_manifold(faces: np.ndarray, n_vertices: int) -> None:
    """Closed orientable surface: every undirected edge in exactly two faces,
    once per direction."""
    if faces.min() < 0 or faces.max() >= n_vertices:
        raise MeshError("face list references a vertex that does not exist")
    directed = {}
    for f, (a, b, c) in enumerate(faces):
        if a == b or b == c or a == c:
            raise MeshError(f"degenerate face {f}: repeated vertex")
        for (u, v) in ((a, b), (b, c), (c, a)):
            if (u, v) in directed:
                raise MeshError(f"non-manifold or inconsistently oriented edge ({u},{v})")
            directed[(u, v)] = f
    for (u, v) in directed:
        if (v, u) not in directed:
            raise MeshError(f"boundary or non-manifold edge ({u},{v}): no opposite face")


# ---------------------------------------------------------------------------
# quadrature rules on the reference triangle
# ---------------------------------------------------------------------------

# cap on (points x panels) pairs handled in one vectorized sweep; geometric
# queries on larger batches run in row blocks to bound peak memory
_PAIR_BLOCK = 2_000_000

# barycentric coordinates and weights (weights sum to 1, nodes strictly interior)
PANEL_RULES = {
    "centroid": (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    "3-point": (
        np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
}


@dataclass
class BoundaryMesh:
    """Flat-panel triangulated boundary with quadrature nodes.

    Arrays: vertices (V,3), panels (P,3) vertex indices, nodes (N,3) quadrature
    points strictly inside panels, weights (N,), node_panel (N,), normals (P,3)
    outward unit normals, tangent_frame (P,2,3) orthonormal tangents.
    """

    vertices: np.ndarray
    panels: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    node_panel: np.ndarray
    normals: np.ndarray
    tangent_frame: np.ndarray
    centroids: np.ndarray
    areas: np.ndarray
    diameters: np.ndarray
    total_area: float
    r_omega_estimate: float
    interior_point: np.ndarray
    rule: str
    spec: DomainSpec | None = None
    _vertex_panels: list | None = field(default=None, repr=False)
    _neighbors: list | None = field(default=None, repr=False)

    # -- derived node-level views -------------------------------------------
    @property
    def n_panels(self) -> int:
        return len(self.panels)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_normals(self) -> np.ndarray:
        return self.normals[self.node_panel]

    @property
    def node_tangent_frame(self) -> np.ndarray:
        return self.tangent_frame[self.node_panel]

    @property
    def node_diameters(self) -> np.ndarray:
        return self.diameters[self.node_panel]

    def panel_vertices(self, idx=None) -> np.ndarray:
        """Triangle corner coordinates, (P,3,3) or (len(idx),3,3)."""
        sel = self.panels if idx is None else self.panels[np.atleast_1d(idx)]
        return self.vertices[sel]

    def neighbors(self, panel: int) -> np.ndarray:
        """Panels sharing at least one vertex with `panel` (excluding itself)."""
        if self._neighbors is None:
            vertex_panels = [[] for _ in range(len(self.vertices))]
            for p, tri in enumerate(self.panels):
                for v in tri:
                    vertex_panels[v].append(p)
            self._vertex_panels = vertex_panels
            nb = []
            for p, tri in enumerate(self.panels):
                s = set()
                for v in tri:
                    s.update(vertex_panels[v])
                s.discard(p)
                nb.append(np.array(sorted(s), dtype=np.int64))
            self._neighbors = nb
        return self._neighbors[panel]

    # -- geometric queries ----------------------------------------------------
    def distance(self, points: np.ndarray, candidates: np.ndarray | None = None):
        """Unsigned distance from points (M,3) to the triangulated surface.

        Returns (dist (M,), closest_panel (M,), closest_point (M,3)).
        Exact point-triangle distance over all (or the given) panels;
        large point batches are processed in row blocks to bound the
        (points x panels) temporaries.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tri_idx = np.arange(self.n_panels) if candidates is None else np.asarray(candidates)
        tv = self.vertices[self.panels[tri_idx]]          # (T,3,3)
        a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
        block = max(1, _PAIR_BLOCK // max(1, len(tri_idx)))
        dist = np.empty(len(pts))
        panel = np.empty(len(pts), dtype=tri_idx.dtype)
        point = np.empty((len(pts), 3))
        for s in range(0, len(pts), block):
            sl = slice(s, min(s + block, len(pts)))
            closest = _point_triangle_closest(pts[sl], a, b, c)   # (m,T,3)
            d2 = np.sum((closest - pts[sl, None, :]) ** 2, axis=2)
            j = np.argmin(d2, axis=1)
            m = np.arange(sl.stop - sl.start)
            dist[sl] = np.sqrt(d2[m, j])
            panel[sl] = tri_idx[j]
            point[sl] = closest[m, j]
        return dist, panel, point

    def radial_exit(self, directions: np.ndarray):
        """First surface hit of rays from the interior point: returns (t, panel).

        Star-shapedness makes this a well-defined radial distance function.
        """
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        block = max(1, _PAIR_BLOCK // max(1, self.n_panels))
        t = np.empty(len(dirs))
        face = np.empty(len(dirs), dtype=np.int64)
        for s in range(0, len(dirs), block):
            sl = slice(s, min(s + block, len(dirs)))
            t[sl], face[sl] = _ray_mesh_first_hit(self.interior_point, dirs[sl],
                                                  self.vertices, self.panels)
        return t, face

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Interior test via the star-shaped radial distance function."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - self.interior_point
        rho = np.linalg.norm(rel, axis=1)
        inside = np.empty(len(pts), dtype=bool)
        zero = rho < 1e-15
        inside[zero] = True
        if np.any(~zero):
            dirs = rel[~zero] / rho[~zero, None]
            t, _ = self.radial_exit(dirs)
            inside[~zero] = rho[~zero] < t
        return inside

    # -- export ---------------------------------------------------------------
    def export_obj(self, path) -> None:
        """OBJ-style text export (v/f records) for external inspection."""
        with open(path, "w") as fh:
            fh.write(f"# boundary mesh: {self.n_panels} panels, {len(self.vertices)} vertices\n")
            for v in self.vertices:
                fh.write("v %.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
            for f in self.panels:
                fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def build_mesh(spec: DomainSpec, rule: str = "centroid") -> BoundaryMesh:
    """Triangulate the domain boundary at the requested refinement level.

    Each refinement pass splits every panel into four; sphere approximations
    push new vertices back to the sphere.  Panel quadrature uses the centroid
    rule or the strictly interior symmetric 3-point rule.
    """
    if rule not in PANEL_RULES:
        raise MeshError(f"unknown panel rule {rule!r}; expected one of {tuple(PANEL_RULES)}")
    project = None
    if spec.kind == "sphere-approximation":
        verts, faces = _icosahedron()
        verts = verts * spec.scale
        project = spec.scale
        interior = np.zeros(3)
    elif spec.kind == "cube":
        h = spec.scale / 2.0
        verts, faces = _box_quads(np.array([-h, -h, -h]), np.array([h, h, h]))
        interior = np.zeros(3)
    elif spec.kind == "l-prism":
        verts, faces, interior = _l_prism(spec.scale)
    else:
        verts = np.asarray(spec.vertices, dtype=float)
        faces = np.asarray(spec.faces, dtype=np.int64)
        interior = None
    if spec.interior_point is not None:
        interior = np.asarray(spec.interior_point, dtype=float)
    if interior is None:
        interior = verts.mean(axis=0)

    _check_manifold(faces, len(verts))

    for _ in range(int(spec.level)):
        verts, faces = _subdivide(verts, faces, project)

    tv = verts[faces]
    e1 = tv[:, 1] - tv[:, 0]
    e2 = tv[:, 2] - tv[:, 0]
    cross = np.cross(e1, e2)
    two_area = np.linalg.norm(cross, axis=1)
    if np.any(two_area < 1e-14 * spec.scale**2):
        raise MeshError("degenerate (zero-area) panel in face list")
    normals = cross / two_area[:, None]
    areas = 0.5 * two_area
    centroids = tv.mean(axis=1)

    # enforce outward orientation for star-shaped domains
    sign = np.einsum("pj,pj->p", normals, centroids - interior)
    if np.all(sign < 0):
        faces = faces[:, [0, 2, 1]]
        tv = verts[faces]
        e1 = tv[:, 1] - tv[:, 0]
        e2 = tv[:, 2] - tv[:, 0]
        cross = np.cross(e1, e2)
        normals = cross / np.linalg.norm(cross, axis=1)[:, None]
        sign = -sign
    if np.any(sign <= 0):
        raise MeshError("inconsistent orientation: some panels face the interior point")

    edges = np.stack([tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 1], tv[:, 0] - tv[:, 2]], axis=1)
    diameters = np.linalg.norm(edges, axis=2).max(axis=1)

    # orthonormal tangent frame per panel
    t1 = e1 / np.linalg.norm(e1, axis=1)[:, None]
    t2 = np.cross(normals, t1)
    tangent_frame = np.stack([t1, t2], axis=1)

    bary, wts = PANEL_RULES[rule]
    nodes = np.einsum("kb,pbj->pkj", bary, tv).reshape(-1, 3)
    weights = (areas[:, None] * wts[None, :]).reshape(-1)
    node_panel = np.repeat(np.arange(len(faces)), len(bary))

    total_area = float(np.sum(areas))
    inradius = _mesh_distance_scalar(interior, verts, faces)
    r_omega = 0.6 * inradius  # heuristic Lipschitz-patch radius for these star domains

    return BoundaryMesh(
        vertices=verts, panels=faces, nodes=nodes, weights=weights,
        node_panel=node_panel, normals=normals, tangent_frame=tangent_frame,
        centroids=centroids, areas=areas, diameters=diameters,
        total_area=total_area, r_omega_estimate=r_omega,
        interior_point=np.asarray(interior, dtype=float), rule=rule, spec=spec,
    )


def _mesh_distance_scalar(point: np.ndarray, verts: np.ndarray, faces: np.ndarray) -> float:
    tv = verts[faces]
    closest = _point_triangle_closest(point[None, :], tv[:, 0], tv[:, 1], tv[:, 2])
    return float(np.sqrt(np.min(np.sum((closest[0] - point) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# point/triangle and ray/triangle primitives (vectorized)
# ---------------------------------------------------------------------------

def _point_triangle_closest(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (T,3 corners) to points p (M,3) -> (M,T,3).

    Standard voronoi-region case analysis, broadcast over points x triangles.
    """
    ab = b - a            # (T,3)
    ac = c - a
    ap = p[:, None, :] - a[None, :, :]    # (M,T,3)
    bp = p[:, None, :] - b[None, :, :]
    cp = p[:, None, :] - c[None, :, :]
    d1 = np.einsum("tj,mtj->mt", ab, ap)
    d2 = np.einsum("tj,mtj->mt", ac, ap)
    d3 = np.einsum("tj,mtj->mt", ab, bp)
    d4 = np.einsum("tj,mtj->mt", ac, bp)
    d5 = np.einsum("tj,mtj->mt", ab, cp)
    d6 = np.einsum("tj,mtj->mt", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = vb / denom
    w = vc / denom
    closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]

    # vertex regions
    m_a = (d1 <= 0) & (d2 <= 0)
    m_b = (d3 >= 0) & (d4 <= d3)
    m_c = (d6 >= 0) & (d5 <= d6)
    # edge AB
    m_ab = (~m_a) & (~m_b) & (d1 * d4 - d3 * d2 <= 0) & (d1 >= 0) & (d3 <= 0)
    t_ab = np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 == 0, 1, d1 - d3), 0.0)
    # edge AC
    m_ac = (~m_a) & (~m_c) & (d5 * d2 - d1 * d6 <= 0) & (d2 >= 0) & (d6 <= 0)
    t_ac = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 == 0, 1, d2 - d6), 0.0)
    # edge BC
    m_bc = (~m_b) & (~m_c) & (d3 * d6 - d5 * d4 <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom_bc = (d4 - d3) + (d5 - d6)
    t_bc = np.where(denom_bc != 0, (d4 - d3) / np.where(denom_bc == 0, 1, denom_bc), 0.0)

    closest = np.where(m_bc[..., None], b[None] + t_bc[..., None] * (c - b)[None], closest)
    closest = np.where(m_ac[..., None], a[None] + t_ac[..., None] * ac[None], closest)
    closest = np.where(m_ab[..., None], a[None] + t_ab[..., None] * ab[None], closest)
    closest = np.where(m_c[..., None], np.broadcast_to(c[None], closest.shape), closest)
    closest = np.where(m_b[..., None], np.broadcast_to(b[None], closest.shape), closest)
    closest = np.where(m_a[..., None], np.broadcast_to(a[None], closest.shape), closest)
    return closest


def _ray_mesh_first_hit(origin: np.ndarray, dirs: np.ndarray, verts: np.ndarray, faces: np.ndarray):
    """Smallest positive ray parameter against all triangles (Moller-Trumbore).

    Returns (t (M,), face (M,)); t = +inf where nothing is hit.
    """
    tv = verts[faces]
    v0, v1, v2 = tv[:, 0], tv[:, 1], tv[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    eps = 1e-14
    h = np.cross(dirs[:, None, :], e2[None, :, :])            # (M,T,3)
    det = np.einsum("tj,mtj->mt", e1, h)
    invdet = np.where(np.abs(det) > eps, 1.0 / np.where(det == 0, 1, det), np.nan)
    s = origin[None, None, :] - v0[None, :, :]
    u = np.einsum("mtj,mtj->mt", np.broadcast_arrays(s, h)[0], h) * invdet
    q = np.cross(s, e1[None, :, :])
    v = np.einsum("mj,mtj->mt", dirs, q) * invdet
    t = np.einsum("tj,mtj->mt", e2, q) * invdet
    # small slack so rays through panel edges still register a hit
    slack = 1e-12
    ok = (u >= -slack) & (v >= -slack) & (u + v <= 1 + slack) & (t > eps) & np.isfinite(t)
    t = np.where(ok, t, np.inf)
    face = np.argmin(t, axis=1)
    m = np.arange(len(dirs))
    return t[m, face], face


# ---------------------------------------------------------------------------
# corkscrew points, surface balls, cones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorkscrewPoint:
    point: np.ndarray
    r_effective: float
    clamped: bool
    note: str = ""


def _averaged_inward_normal(mesh: BoundaryMesh, q: np.ndarray) -> np.ndarray:
    """Average of the distinct face normals adjacent to q, pointing inward.

    Normals are deduplicated by direction so that a triangulated cube corner
    averages its three face planes, not its incident triangle count.
    """
    d, _, _ = mesh.distance(q[None, :])
    tol = 1e-9 * (1.0 + float(np.abs(q).max()))
    if d[0] > 100 * tol:
        raise MeshError(f"corkscrew/cone base point is not on the boundary (distance {d[0]:.3e})")
    tv = mesh.vertices[mesh.panels]
    closest = _point_triangle_closest(q[None, :], tv[:, 0], tv[:, 1], tv[:, 2])[0]
    dist_all = np.linalg.norm(closest - q, axis=1)
    touching = np.where(dist_all <= 100 * tol)[0]
    if len(touching) == 0:
        touching = np.array([int(np.argmin(dist_all))])
    uniq = []
    for p in touching:
        n = mesh.normals[p]
        if not any(np.dot(n, u) > 1.0 - 1e-9 for u in uniq):
            uniq.append(n)
    avg = -np.mean(uniq, axis=0)
    nrm = np.linalg.norm(avg)
    if nrm < 1e-12:
        # opposing faces cancelled; fall back to the interior direction
        avg = mesh.interior_point - q
        nrm = np.linalg.norm(avg)
    return avg / nrm


def corkscrew_point(mesh: BoundaryMesh, q: np.ndarray, r: float) -> CorkscrewPoint:
    """Interior point at depth ~r/2 from boundary point q.

    Guarantees |A_r - q| >= r/2 and dist(A_r, boundary) >= r/CORKSCREW_C0,
    marching along the averaged inward normal with a fallback along the
    segment to the interior point.  r above the mesh inradius returns the
    interior point itself, flagged clamped; r above r_omega_estimate is
    clamped to it with a warning note.
    """
    q = np.asarray(q, dtype=float)
    if not (r > 0 and np.isfinite(r)):
        raise MeshError(f"corkscrew radius must be positive, got {r}")
    inradius = mesh.r_omega_estimate / 0.6
    note = ""
    clamped = False
    if r > inradius:
        return CorkscrewPoint(point=mesh.interior_point.copy(), r_effective=r,
                              clamped=True, note="r exceeds inradius; returning interior point")
    if r > mesh.r_omega_estimate:
        note = f"r={r:.3g} exceeds r_omega_estimate={mesh.r_omega_estimate:.3g}; clamped"
        r = mesh.r_omega_estimate
        clamped = True
    need = r / CORKSCREW_C0
    n_in = _averaged_inward_normal(mesh, q)
    cand = q + 0.5 * r * n_in
    d, _, _ = mesh.distance(cand[None, :])
    if d[0] >= need and mesh.contains(cand[None, :])[0]:
        return CorkscrewPoint(point=cand, r_effective=r, clamped=clamped, note=note)
    # fallback: march toward the star center
    seg = mesh.interior_point - q
    seg_len = np.linalg.norm(seg)
    cand = q + 0.5 * r * seg / seg_len
    d, _, _ = mesh.distance(cand[None, :])
    if d[0] >= need and mesh.contains(cand[None, :])[0]:
        return CorkscrewPoint(point=cand, r_effective=r, clamped=clamped,
                              note=note + " (segment fallback)")
    return CorkscrewPoint(point=mesh.interior_point.copy(), r_effective=r, clamped=True,
                          note=note + " corkscrew construction failed; returning interior point")


def surface_ball(mesh: BoundaryMesh, q: np.ndarray, r: float) -> np.ndarray:
    """Panels whose centroid lies within Euclidean distance r of q.

    Panels touching q itself are always included, so the r -> 0 limit is the
    set of panels adjacent to q rather than the empty set.
    """
    q = np.asarray(q, dtype=float)
    if r < 0:
        raise MeshError("surface ball radius must be nonnegative")
    sel = np.linalg.norm(mesh.centroids - q, axis=1) <= r
    tv = mesh.vertices[mesh.panels]
    closest = _point_triangle_closest(q[None, :], tv[:, 0], tv[:, 1], tv[:, 2])[0]
    touch = np.linalg.norm(closest - q, axis=1) <= 1e-9 * (1.0 + np.abs(q).max())
    return np.where(sel | touch)[0]


@dataclass
class ConeSamples:
    """Sample points inside the nontangential cone at q, plus bookkeeping."""
    base: np.ndarray
    axis: np.ndarray
    aperture: float
    points: np.ndarray
    radii: np.ndarray
    n_discarded: int

    def membership(self, mesh: BoundaryMesh, x: np.ndarray, a: float = 1.0) -> np.ndarray:
        x = np.atleast_2d(x)
        d, _, _ = mesh.distance(x)
        inside = mesh.contains(x)
        return inside & (np.linalg.norm(x - self.base, axis=1) <= (1.0 + a) * d)


def cone_samples(mesh: BoundaryMesh, q: np.ndarray, n_rays: int = 8, n_radii: int = 6,
                 aperture: float = math.pi / 4, r_min: float | None = None,
                 r_max: float | None = None, a: float = 1.0) -> ConeSamples:
    """Deterministic samples of the cone {x : |x-q| <= (1+a) dist(x, boundary)}.

    Rays are spread within `aperture` of the averaged inward normal; radii form
    a geometric grid.  Samples violating the exact membership predicate (or
    escaping the domain near corners) are discarded and counted.
    """
    q = np.asarray(q, dtype=float)
    axis = _averaged_inward_normal(mesh, q)
    if r_max is None:
        r_max = mesh.r_omega_estimate
    if r_max == 0.0:
        return ConeSamples(base=q, axis=axis, aperture=aperture,
                           points=np.empty((0, 3)), radii=np.empty(0), n_discarded=0)
    if r_min is None:
        r_min = max(1e-3 * r_max, float(mesh.diameters.min()) * 0.05)
    if not (0 < r_min < r_max):
        raise MeshError("cone sample radii must satisfy 0 < r_min < r_max")
    # orthonormal completion of the axis
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    dirs = [axis]
    for k in range(max(0, n_rays - 1)):
        phi = 2.0 * math.pi * k / max(1, n_rays - 1)
        d = math.cos(aperture) * axis + math.sin(aperture) * (math.cos(phi) * u + math.sin(phi) * v)
        dirs.append(d / np.linalg.norm(d))
    dirs = np.array(dirs)
    radii = np.geomspace(r_min, r_max, n_radii)
    pts = (q[None, None, :] + radii[None, :, None] * dirs[:, None, :]).reshape(-1, 3)
    d, _, _ = mesh.distance(pts)
    keep = mesh.contains(pts) & (np.linalg.norm(pts - q, axis=1) <= (1.0 + a) * d)
    return ConeSamples(base=q, axis=axis, aperture=aperture, points=pts[keep],
                       radii=radii, n_discarded=int(np.sum(~keep)))
