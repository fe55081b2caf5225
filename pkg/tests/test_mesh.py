import io
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from shapesync.errors import (DegenerateMesh, DisconnectedMeshWarning, IndexOutOfRange, NonManifoldWarning,
                              ParseError)
from shapesync.mesh import (TriangleMesh, cotangent_laplacian, geodesic_distances, graph_distances, load_mesh,
                            mass_matrix, off_text, save_off)
from shapesync.primitives import blob, grid, icosphere, tetrahedron, unit_square

TET_OFF = b"""OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""

CUBE_OBJ_BAD = "\n".join(
    [f"v {x} {y} {z}" for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    + ["f 1 2 3", "f 2 4 9"]
).encode()


def test_load_off_tetrahedron():
    m = load_mesh(TET_OFF, "off")
    assert (m.n_vertices, m.n_faces) == (4, 4)
    assert np.array_equal(m.vertices, tetrahedron().vertices)


def test_obj_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        load_mesh(CUBE_OBJ_BAD, "obj")


def test_icosphere_counts_through_off(tmp_path):
    ico = icosphere(2)
    save_off(ico, tmp_path / "ico.off")
    m = load_mesh(tmp_path / "ico.off")
    # an icosahedron has 12 vertices / 20 faces and each subdivision quadruples the faces
    faces = 20 * 4 ** 2
    edges = faces * 3 // 2
    assert (m.n_vertices, m.n_faces) == (2 - faces + edges, faces) == (162, 320)


def test_obj_polygons_and_slashes():
    text = b"# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n"
    m = load_mesh(text, "obj")
    assert m.n_faces == 2
    assert m.surface_area == pytest.approx(1.0, abs=1e-12)


def test_obj_negative_indices():
    text = b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2\nf -4 -2 -1\n"
    assert load_mesh(text, "obj").n_faces == 2


def test_ply_ascii():
    text = b"""ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
element face 4
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""
    m = load_mesh(io.BytesIO(text), "ply")
    assert np.array_equal(m.faces, tetrahedron().faces)


@pytest.mark.parametrize("bad", [
    b"OFF\n4 1 0\n0 0 0\n1 0 0\n",
    b"OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 x\n3 0 1 2\n",
    b"NOPE\n",
    b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
])
def test_off_parse_errors(bad):
    with pytest.raises(ParseError):
        load_mesh(bad, "off")


def test_degenerate_face():
    with pytest.raises(DegenerateMesh):
        load_mesh(b"OFF\n4 2 0\n0 0 0\n1 0 0\n2 0 0\n0 1 0\n3 0 1 2\n3 0 1 3\n", "off")


def test_off_round_trip_bit_exact(tmp_path):
    m = blob(80, seed=3)
    save_off(m, tmp_path / "b.off")
    m2 = load_mesh(tmp_path / "b.off")
    assert np.array_equal(m.vertices, m2.vertices)
    assert np.array_equal(m.faces, m2.faces)
    assert off_text(m2) == off_text(m)


def test_mesh_is_immutable(tet):
    with pytest.raises(ValueError):
        tet.vertices[0, 0] = 5.0


# ---------------------------------------------------------------------------
# Laplacian


@pytest.mark.parametrize("mesh", [tetrahedron(), icosphere(1), blob(60), grid(4, 3)], ids=lambda m: m.name)
def test_laplacian_constant_kernel_and_symmetry(mesh):
    W = cotangent_laplacian(mesh)
    assert np.abs(W @ np.ones(mesh.n_vertices)).max() < 1e-9
    assert abs(W - W.T).max() < 1e-12


def test_laplacian_square_hand_cotangents():
    # square split on the (0, 2) diagonal: the diagonal edge is opposite two
    # right angles (cot 90 = 0); each side edge is opposite one 45 degree angle.
    W = cotangent_laplacian(unit_square()).toarray()
    expected = np.zeros((4, 4))
    for i, j in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        expected[i, j] = expected[j, i] = -0.5 * 1.0
    expected[0, 2] = expected[2, 0] = -0.5 * 0.0
    np.fill_diagonal(expected, -expected.sum(axis=1))
    assert np.allclose(W, expected, atol=1e-12)


def test_laplacian_psd_random_vectors(rng):
    W = cotangent_laplacian(blob(120, seed=1))
    X = rng.standard_normal((120, 100))
    assert np.min(np.einsum("ij,ij->j", X, W @ X)) >= -1e-9


def test_icosphere_pencil_smallest_eigenvalue(ico):
    W = cotangent_laplacian(ico).toarray()
    M = mass_matrix(ico).toarray()
    assert abs(scipy.linalg.eigh(W, M, eigvals_only=True)[0]) < 1e-6


def test_non_manifold_warning():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1.0]])
    f = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.warns(NonManifoldWarning):
        W = cotangent_laplacian(TriangleMesh(v, f))
    assert np.abs(W @ np.ones(5)).max() < 1e-12


# ---------------------------------------------------------------------------
# mass


def test_tetrahedron_lumped_mass(tet):
    # one right triangle of area 1/2 on each axis plane plus an equilateral face of area sqrt(3)/2
    area = 1.5 + np.sqrt(3) / 2
    d = mass_matrix(tet).diagonal()
    assert tet.surface_area == pytest.approx(area, abs=1e-12)
    assert d.sum() == pytest.approx(area, abs=1e-9)
    assert d[0] == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(d[1:], (1.0 + np.sqrt(3) / 2) / 3, atol=1e-12)


def test_single_triangle_lumped_mass():
    m = TriangleMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0.0]]), np.array([[0, 1, 2]]))
    assert np.allclose(mass_matrix(m).diagonal(), 3.0 / 3)


@pytest.mark.parametrize("lumped", [True, False])
def test_mass_integrates_area(lumped):
    m = blob(90, seed=2)
    M = mass_matrix(m, lumped=lumped)
    assert M.sum() == pytest.approx(m.surface_area, abs=1e-9)
    if not lumped:
        assert np.linalg.eigvalsh(M.toarray())[0] > 0


def test_lumped_vs_full_quadratic_form(ico):
    z = ico.vertices[:, 2]
    a = z @ (mass_matrix(ico, True) @ z)
    b = z @ (mass_matrix(ico, False) @ z)
    assert abs(a - b) / b < 0.05


# ---------------------------------------------------------------------------
# geodesics


def test_geodesic_path_graph():
    d = graph_distances(4, np.array([[0, 1], [1, 2], [2, 3]]), np.ones(3), 0)
    assert np.array_equal(d, [0.0, 1.0, 2.0, 3.0])


def test_geodesic_antipodal_icosphere(ico):
    src = 0
    anti = int(np.argmin(ico.vertices @ ico.vertices[src]))
    d = geodesic_distances(ico, src)
    assert d[src] == 0
    assert 0.9 * np.pi <= d[anti] <= 1.1 * np.pi


@given(st.lists(st.integers(0, 161), min_size=3, max_size=3))
def test_geodesic_triangle_inequality(triple):
    ico = icosphere(2)
    a, b, c = triple
    D = geodesic_distances(ico, [a, b])
    assert D[0, c] <= D[0, b] + D[1, c] + 1e-9


def test_geodesic_disconnected_warns():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5.0]])
    f = np.array([[0, 1, 2], [3, 4, 5]])
    with pytest.warns(DisconnectedMeshWarning):
        d = geodesic_distances(TriangleMesh(v, f), 0)
    assert np.isinf(d[3:]).all() and np.isfinite(d[:3]).all()


def test_geodesic_source_out_of_range(tet):
    with pytest.raises(IndexOutOfRange):
        geodesic_distances(tet, 4)


def test_permuted_mesh_preserves_geometry():
    m = blob(50)
    perm = np.random.default_rng(0).permutation(50)
    p = m.permuted(perm)
    assert p.surface_area == pytest.approx(m.surface_area, rel=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        d0 = geodesic_distances(m, perm[7])
        d1 = geodesic_distances(p, 7)
    assert np.allclose(d1, d0[perm], atol=1e-12)
