import math
import numpy as np
import pytest

from driftbem.geometry import (
    DomainSpec, MeshError, build_mesh, surface_ball, corkscrew_point,
    cone_samples, CORKSCREW_C0,
)


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------

def test_sphere_level2_panel_count(sphere2):
    assert sphere2.n_panels == 320          # icosahedron base 20, x4 per level


def test_cube_level1_panel_count():
    mesh = build_mesh(DomainSpec(kind="cube", scale=2.0, level=1))
    assert mesh.n_panels == 48              # 12 base triangles x 4


def test_l_prism_base_panel_count():
    mesh = build_mesh(DomainSpec(kind="l-prism", level=0))
    assert mesh.n_panels == 20              # 2 x 4 cap triangles + 6 x 2 walls


def test_sphere_level4_total_area(sphere4):
    exact = 4.0 * math.pi
    assert abs(sphere4.total_area - exact) / exact <= 2e-3


def test_weights_sum_to_total_area(sphere3):
    assert abs(sphere3.weights.sum() - sphere3.total_area) <= 1e-12 * sphere3.total_area


@pytest.mark.parametrize("rule", ["centroid", "3-point"])
def test_per_panel_quadrature_exactness(rule):
    mesh = build_mesh(DomainSpec(kind="sphere-approximation", level=2), rule=rule)
    per_panel = np.zeros(mesh.n_panels)
    np.add.at(per_panel, mesh.node_panel, mesh.weights)
    assert np.max(np.abs(per_panel - mesh.areas)) <= 1e-12 * mesh.areas.max()


def test_normals_and_tangent_frames(sphere3):
    assert np.allclose(np.linalg.norm(sphere3.normals, axis=1), 1.0, atol=1e-12)
    t1 = sphere3.tangent_frame[:, 0]
    t2 = sphere3.tangent_frame[:, 1]
    n = sphere3.normals
    assert np.abs(np.einsum("pj,pj->p", t1, t2)).max() <= 1e-12
    assert np.abs(np.einsum("pj,pj->p", t1, n)).max() <= 1e-12
    assert np.abs(np.einsum("pj,pj->p", t2, n)).max() <= 1e-12
    assert np.allclose(np.linalg.norm(t1, axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(t2, axis=1), 1.0, atol=1e-12)
    # outward orientation: normals point away from the star center
    assert np.all(np.einsum("pj,pj->p",
                            sphere3.normals,
                            sphere3.centroids - sphere3.interior_point) > 0)


def test_nodes_strictly_inside_panels():
    mesh = build_mesh(DomainSpec(kind="cube", scale=2.0, level=1), rule="3-point")
    # every node keeps a positive distance from each edge of its panel
    tv = mesh.panel_vertices()[mesh.node_panel]
    for k in range(3):
        a = tv[:, k]
        b = tv[:, (k + 1) % 3]
        edge = b - a
        n = mesh.node_normals
        inward = np.cross(n, edge)
        side = np.einsum("nj,nj->n", mesh.nodes - a, inward)
        assert side.min() > 1e-6


def test_refinement_consistency():
    areas, r_om = [], []
    for lvl in (3, 4, 5):
        m = build_mesh(DomainSpec(kind="sphere-approximation", level=lvl))
        areas.append(m.total_area)
        r_om.append(m.r_omega_estimate)
    for a0, a1 in zip(areas, areas[1:]):
        assert abs(a1 - a0) / a0 <= 1e-2
    for r0, r1 in zip(r_om, r_om[1:]):
        assert r1 >= r0 / 2.0              # never drops by more than 2x


def test_non_manifold_rejected():
    # three faces sharing one edge
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], float)
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshError):
        build_mesh(DomainSpec(kind="explicit", vertices=verts, faces=faces))


def test_inconsistent_orientation_rejected():
    # tetrahedron with one face flipped: the directed-edge check trips
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 2, 3]])
    with pytest.raises(MeshError):
        build_mesh(DomainSpec(kind="explicit", vertices=verts, faces=faces))


def test_open_surface_rejected():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3]])   # missing one face
    with pytest.raises(MeshError):
        build_mesh(DomainSpec(kind="explicit", vertices=verts, faces=faces))


def test_spec_validation():
    with pytest.raises(MeshError):
        DomainSpec(kind="torus")
    with pytest.raises(MeshError):
        DomainSpec(kind="cube", scale=-1.0)
    with pytest.raises(MeshError):
        DomainSpec(kind="cube", level=7)
    with pytest.raises(MeshError):
        DomainSpec(kind="explicit")


def test_obj_roundtrip(tmp_path, sphere2):
    path = tmp_path / "mesh.obj"
    sphere2.export_obj(path)
    verts, faces = [], []
    for line in path.read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(t) for t in line.split()[1:]])
        elif line.startswith("f "):
            faces.append([int(t) - 1 for t in line.split()[1:]])
    assert np.allclose(np.array(verts), sphere2.vertices)
    assert np.array_equal(np.array(faces), sphere2.panels)


# ---------------------------------------------------------------------------
# distance / containment queries
# ---------------------------------------------------------------------------

def test_cube_distances():
    cube = build_mesh(DomainSpec(kind="cube", scale=2.0, level=1))
    d, _, _ = cube.distance(np.array([[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]]))
    assert abs(d[0] - 1.0) <= 1e-12
    assert abs(d[1] - 0.7) <= 1e-12


def test_contains_radial(sphere3):
    rng = np.random.default_rng(4)
    dirs = rng.standard_normal((64, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    t, _ = sphere3.radial_exit(dirs)
    assert np.all(t > 0.9) and np.all(t <= 1.0 + 1e-12)
    assert sphere3.contains(0.99 * t[:, None] * dirs).all()
    assert not sphere3.contains(1.01 * t[:, None] * dirs).any()


def test_distance_matches_closest_point(sphere3):
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((32, 3)) * 0.8
    d, panel, closest = sphere3.distance(pts)
    assert np.allclose(d, np.linalg.norm(closest - pts, axis=1), atol=1e-12)
    # the reported closest point lies on the reported panel's plane
    n = sphere3.normals[panel]
    a = sphere3.panel_vertices(panel)[:, 0]
    assert np.abs(np.einsum("nj,nj->n", closest - a, n)).max() <= 1e-9


# ---------------------------------------------------------------------------
# surface balls
# ---------------------------------------------------------------------------

def test_surface_ball_everything(sphere3):
    q = sphere3.vertices[np.argmax(sphere3.vertices[:, 2])]
    assert len(surface_ball(sphere3, q, 2.1)) == sphere3.n_panels


def test_surface_ball_zero_limit(sphere3):
    vid = int(np.argmax(sphere3.vertices[:, 2]))
    q = sphere3.vertices[vid]
    got = set(surface_ball(sphere3, q, 1e-12).tolist())
    adjacent = {p for p, tri in enumerate(sphere3.panels) if vid in tri}
    assert got == adjacent


def test_surface_ball_cap_area():
    mesh = build_mesh(DomainSpec(kind="sphere-approximation", level=5))
    q = mesh.vertices[np.argmax(mesh.vertices[:, 2])]
    cap = mesh.areas[surface_ball(mesh, q, 0.2)].sum()
    exact = 2.0 * math.pi * (1.0 - math.cos(0.2))
    assert abs(cap - exact) / exact <= 5e-2


# ---------------------------------------------------------------------------
# corkscrew points
# ---------------------------------------------------------------------------

def test_corkscrew_sphere_pole(sphere3):
    q = sphere3.vertices[np.argmax(sphere3.vertices[:, 2])]
    ck = corkscrew_point(sphere3, q, 0.5)
    assert not ck.clamped
    assert np.linalg.norm(ck.point - np.array([0.0, 0.0, 0.75])) <= 1e-12
    d, _, _ = sphere3.distance(ck.point[None, :])
    assert abs(d[0] - 0.25) <= 2e-2         # polyhedral boundary sits slightly inside
    assert d[0] >= 0.5 / CORKSCREW_C0


def test_corkscrew_guarantees(sphere3):
    rng = np.random.default_rng(12)
    for _ in range(20):
        pid = rng.integers(sphere3.n_panels)
        q = sphere3.centroids[pid]
        r = float(rng.uniform(0.05, sphere3.r_omega_estimate))
        ck = corkscrew_point(sphere3, q, r)
        assert np.linalg.norm(ck.point - q) >= r / 2.0 - 1e-12
        d, _, _ = sphere3.distance(ck.point[None, :])
        assert d[0] >= r / CORKSCREW_C0 - 1e-12
        assert sphere3.contains(ck.point[None, :])[0]


def test_corkscrew_clamp(sphere3):
    ck = corkscrew_point(sphere3, sphere3.centroids[0], 10.0)
    assert ck.clamped
    assert np.allclose(ck.point, sphere3.interior_point)


def test_corkscrew_cube_corner():
    cube = build_mesh(DomainSpec(kind="cube", scale=2.0, level=2))
    corner = np.array([1.0, 1.0, 1.0])
    ck = corkscrew_point(cube, corner, 0.2)
    assert not ck.clamped
    # inward diagonal march: all three face distances equal 0.1/sqrt(3)
    d, _, _ = cube.distance(ck.point[None, :])
    assert d[0] >= 0.2 / (2.0 * math.sqrt(3.0)) - 1e-12
    diag = (corner - ck.point)
    assert np.allclose(diag / np.linalg.norm(diag), np.ones(3) / math.sqrt(3.0), atol=1e-12)


# ---------------------------------------------------------------------------
# cones
# ---------------------------------------------------------------------------

def test_cone_samples_membership(sphere3):
    q = sphere3.vertices[np.argmax(sphere3.vertices[:, 2])]
    cone = cone_samples(sphere3, q, n_rays=8, n_radii=6)
    assert len(cone.points) + cone.n_discarded == 48
    assert len(cone.points) > 0
    assert cone.membership(sphere3, cone.points).all()
    assert sphere3.contains(cone.points).all()


def test_cone_height_zero(sphere3):
    q = sphere3.vertices[np.argmax(sphere3.vertices[:, 2])]
    cone = cone_samples(sphere3, q, r_max=0.0)
    assert len(cone.points) == 0


def test_cone_cube_corner():
    cube = build_mesh(DomainSpec(kind="cube", scale=2.0, level=2))
    corner = np.array([1.0, 1.0, 1.0])
    cone = cone_samples(cube, corner, n_rays=8, n_radii=6)
    assert len(cone.points) > 0
    assert cone.membership(cube, cone.points).all()
