"""Small procedurally generated meshes used by tests, examples and the CLI demo."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriangleMesh


def tetrahedron(name: str = "tetrahedron") -> TriangleMesh:
    """Corner tetrahedron on the origin and the three unit axis points."""
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(v, f, name)


def unit_square(name: str = "square") -> TriangleMesh:
    """Unit square split along the (0, 2) diagonal. Only 4 vertices, open boundary."""
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(v, f, name)


def grid(nx: int, ny: int, width: float = 1.0, height: float = 1.0, name: str = "grid") -> TriangleMesh:
    """Flat rectangle sampled on an (nx+1) x (ny+1) vertex lattice."""
    xs, ys = np.meshgrid(np.linspace(0, width, nx + 1), np.linspace(0, height, ny + 1), indexing="xy")
    v = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    f = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(v, f, name)


def icosphere(subdivisions: int = 2, radius: float = 1.0, name: str = "icosphere") -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere (10 * 4**s + 2 vertices)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(radius * np.array(verts), np.array(faces), name)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - 5 ** 0.5) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def blob(n: int = 200, seed: int = 0, name: str = "blob") -> TriangleMesh:
    """Closed genus-0 surface with no rigid symmetry.

    Points on a sphere are triangulated by their convex hull, then pushed
    radially by a smooth random bump field and scaled anisotropically so the
    Laplace-Beltrami spectrum has no multiplicities.
    """
    rng = np.random.default_rng(seed)
    p = fibonacci_sphere(n)
    hull = ConvexHull(p)
    faces = hull.simplices.copy()
    # orient faces outward
    centers = p[faces].mean(axis=1)
    normals = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    flip = np.einsum("ij,ij->i", normals, centers) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    centres = fibonacci_sphere(6) @ _random_rotation(rng).T
    amps = rng.uniform(0.1, 0.3, size=len(centres))
    radial = 1.0 + sum(a * np.exp(-np.sum((p - c) ** 2, axis=1) / 0.3) for a, c in zip(amps, centres))
    v = p * radial[:, None] * np.array([1.0, 0.8, 0.6])
    return TriangleMesh(v, faces, name)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rotation(seed: int = 0) -> np.ndarray:
    return _random_rotation(np.random.default_rng(seed))
