"""Triangle meshes: loading, saving and the discrete operators built on them."""

from __future__ import annotations

import io
import logging
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    DegenerateMesh,
    DisconnectedMeshWarning,
    IndexOutOfRange,
    NonManifoldWarning,
    ParseError,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12


class MeshFormat(str, Enum):
    OFF = "off"
    OBJ = "obj"
    PLY = "ply"


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh.

    Vertex order is significant: correspondences are expressed as vertex
    indices, so nothing here ever reorders vertices.

    Parameters
    ----------
    vertices : (n, 3) float array
    faces : (m, 3) int array of vertex indices
    name : str
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = "mesh"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeMismatch(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
            raise ShapeMismatch(f"faces must be (m, 3) with m >= 1, got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise DegenerateMesh("non-finite vertex coordinates")
        if f.min() < 0 or f.max() >= v.shape[0]:
            bad = int(f.max()) if f.max() >= v.shape[0] else int(f.min())
            raise IndexOutOfRange(f"face index {bad} outside [0, {v.shape[0]})")
        areas = _face_areas(v, f)
        small = np.flatnonzero(areas <= MIN_FACE_AREA)
        if small.size:
            raise DegenerateMesh(f"{small.size} face(s) with area <= {MIN_FACE_AREA}, first is face {small[0]}")
        v.flags.writeable = False
        f.flags.writeable = False
        areas.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        self._cache["face_areas"] = areas

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def face_areas(self) -> np.ndarray:
        return self._cache["face_areas"]

    @property
    def surface_area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) array with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def permuted(self, perm: np.ndarray, name: str | None = None) -> "TriangleMesh":
        """Copy whose new vertex ``t`` is old vertex ``perm[t]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return TriangleMesh(self.vertices[perm], inv[self.faces], name or f"{self.name}_perm")

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0), name: str | None = None) -> "TriangleMesh":
        v = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return TriangleMesh(v, self.faces, name or self.name)


def _face_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


# ---------------------------------------------------------------------------
# I/O


Source = Union[bytes, str, os.PathLike, BinaryIO]


def load_mesh(source: Source, format: MeshFormat | str | None = None, name: str | None = None) -> TriangleMesh:
    """Parse an OFF, OBJ or ASCII PLY mesh.

    ``source`` may be raw bytes, a binary file object or a path. When it is a
    path and ``format`` is omitted the format comes from the file suffix.
    """
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        data = path.read_bytes()
        if format is None:
            format = path.suffix.lstrip(".").lower()
        name = name or path.stem
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
    if format is None:
        raise ParseError("mesh format could not be inferred")
    try:
        fmt = MeshFormat(str(format.value if isinstance(format, MeshFormat) else format).lower())
    except ValueError as exc:
        raise ParseError(f"unsupported mesh format {format!r}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("mesh file is not ASCII/UTF-8 text (binary PLY is unsupported)") from exc

    parser = {MeshFormat.OFF: _parse_off, MeshFormat.OBJ: _parse_obj, MeshFormat.PLY: _parse_ply}[fmt]
    vertices, faces = parser(text)
    if len(vertices) < 4:
        raise ParseError(f"mesh has {len(vertices)} vertices, at least 4 required")
    if len(faces) < 1:
        raise ParseError("mesh has no faces")
    faces = _triangulate(faces, len(vertices))
    return TriangleMesh(np.asarray(vertices, dtype=np.float64), faces, name or "mesh")


def _triangulate(polys: list[list[int]], n: int) -> np.ndarray:
    tris = []
    for poly in polys:
        if len(poly) < 3:
            raise ParseError(f"face with {len(poly)} vertices")
        for idx in poly:
            if idx < 0 or idx >= n:
                raise IndexOutOfRange(f"face index {idx} outside [0, {n})")
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    return np.asarray(tris, dtype=np.int64)


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: expected numbers, got {' '.join(tokens)!r}") from exc


def _ints(tokens, lineno):
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: expected integers, got {' '.join(tokens)!r}") from exc


def _parse_off(text: str):
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line.split()))
    if not lines:
        raise ParseError("empty OFF file")
    lineno, head = lines[0]
    if not head[0].upper().endswith("OFF"):
        raise ParseError(f"line {lineno}: missing OFF header")
    if head[0].upper() != "OFF":
        raise ParseError(f"line {lineno}: unsupported OFF variant {head[0]!r}")
    rest = head[1:]
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise ParseError("OFF: missing counts line")
        lineno, rest = lines[1]
        pos = 2
    if len(rest) < 2:
        raise ParseError(f"line {lineno}: OFF counts need vertex and face numbers")
    nv, nf = _ints(rest[:2], lineno)
    if len(lines) < pos + nv + nf:
        raise ParseError(f"OFF: expected {nv} vertices and {nf} faces, file is truncated")
    vertices = []
    for lineno, tok in lines[pos:pos + nv]:
        if len(tok) < 3:
            raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
        vertices.append(_floats(tok[:3], lineno))
    faces = []
    for lineno, tok in lines[pos + nv:pos + nv + nf]:
        vals = _ints(tok, lineno) if all(_is_int(t) for t in tok) else None
        if vals is None:
            # trailing colour values may be floats
            count = _ints(tok[:1], lineno)[0]
            vals = [count] + _ints(tok[1:1 + count], lineno)
        count = vals[0]
        if len(vals) < count + 1:
            raise ParseError(f"line {lineno}: face declares {count} vertices, found {len(vals) - 1}")
        faces.append(vals[1:count + 1])
    return vertices, faces


def _is_int(token: str) -> bool:
    try:
        int(token)
        return True
    except ValueError:
        return False


def _parse_obj(text: str):
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
            vertices.append(_floats(tok[1:4], lineno))
        elif tok[0] == "f":
            idx = []
            for t in tok[1:]:
                head = t.split("/", 1)[0]
                k = _ints([head], lineno)[0]
                if k == 0:
                    raise ParseError(f"line {lineno}: OBJ indices are 1-based, got 0")
                # negative indices are relative to the vertices read so far
                idx.append(k - 1 if k > 0 else len(vertices) + k)
            faces.append(idx)
    return vertices, faces


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("line 1: missing ply magic")
    elements = []  # (name, count, [property names], list-property flag)
    fmt = None
    i = 1
    while True:
        if i >= len(lines):
            raise ParseError("PLY: missing end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"line {i}: malformed element line")
            elements.append([tok[1], _ints(tok[2:3], i)[0], []])
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"line {i}: property before element")
            elements[-1][2].append(tok[-1] if tok[1] != "list" else ("list", tok[-1]))
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"line {i}: unexpected header keyword {tok[0]!r}")
    if fmt != "ascii":
        raise ParseError(f"PLY format {fmt!r} unsupported, only ascii")
    body = [(n + 1, ln.split()) for n, ln in enumerate(lines[i:], i) if ln.strip()]
    pos = 0
    vertices, faces = [], []
    for name, count, props in elements:
        if pos + count > len(body):
            raise ParseError(f"PLY: element {name!r} truncated")
        chunk = body[pos:pos + count]
        pos += count
        if name == "vertex":
            try:
                ix, iy, iz = (props.index(c) for c in ("x", "y", "z"))
            except ValueError as exc:
                raise ParseError("PLY: vertex element lacks x/y/z") from exc
            for lineno, tok in chunk:
                if len(tok) < len(props):
                    raise ParseError(f"line {lineno}: vertex has {len(tok)} values, expected {len(props)}")
                vertices.append(_floats([tok[ix], tok[iy], tok[iz]], lineno))
        elif name == "face":
            for lineno, tok in chunk:
                vals = _ints(tok[: 1 + (_ints(tok[:1], lineno)[0] if tok else 0)], lineno)
                if not vals or len(vals) < vals[0] + 1:
                    raise ParseError(f"line {lineno}: malformed face")
                faces.append(vals[1:vals[0] + 1])
    return vertices, faces


def off_text(mesh: TriangleMesh) -> str:
    out = io.StringIO()
    out.write(f"OFF\n{mesh.n_vertices} {mesh.n_faces} 0\n")
    for x, y, z in mesh.vertices:
        # repr gives the shortest string that round-trips the float exactly
        out.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    for a, b, c in mesh.faces:
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue()


def save_off(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    from .formats import atomic_write_text

    atomic_write_text(path, off_text(mesh))


# ---------------------------------------------------------------------------
# operators


def _corner_cotangents(mesh: TriangleMesh) -> np.ndarray:
    """(m, 3) cotangent of the angle at each face corner."""
    v, f = mesh.vertices, mesh.faces
    cots = np.empty(f.shape, dtype=np.float64)
    for k in range(3):
        a = v[f[:, (k + 1) % 3]] - v[f[:, k]]
        b = v[f[:, (k + 2) % 3]] - v[f[:, k]]
        dot = np.einsum("ij,ij->i", a, b)
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cots[:, k] = dot / cross
    return cots


def _check_manifold(mesh: TriangleMesh) -> None:
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    bad = int(np.count_nonzero(counts > 2))
    if bad:
        warnings.warn(f"{mesh.name}: {bad} non-manifold edge(s); cotangent weights accumulate over all incident faces",
                      NonManifoldWarning, stacklevel=3)


def cotangent_laplacian(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Symmetric positive semi-definite cotangent stiffness matrix W.

    Off-diagonal entries are ``-(cot a_ij + cot b_ij) / 2`` summed over the
    faces sharing edge (i, j); the diagonal makes every row sum to zero.
    """
    if "stiffness" in mesh._cache:
        return mesh._cache["stiffness"]
    _check_manifold(mesh)
    cots = _corner_cotangents(mesh)
    if not np.all(np.isfinite(cots)):
        raise DegenerateMesh(f"{mesh.name}: non-finite cotangent weight")
    f = mesh.faces
    rows, cols, vals = [], [], []
    for k in range(3):
        i = f[:, (k + 1) % 3]
        j = f[:, (k + 2) % 3]
        w = -0.5 * cots[:, k]
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = mesh.n_vertices
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    W = (off + sparse.diags(diag)).tocsr()
    W.sum_duplicates()
    W.sort_indices()
    mesh._cache["stiffness"] = W
    return W


def mass_matrix(mesh: TriangleMesh, lumped: bool = True) -> sparse.csr_matrix:
    """Lumped (barycentric) or full Galerkin mass matrix.

    Both variants integrate the constant function to the total surface area:
    the entries of either matrix sum to ``mesh.surface_area``.
    """
    key = "mass_lumped" if lumped else "mass_full"
    if key in mesh._cache:
        return mesh._cache[key]
    n = mesh.n_vertices
    f = mesh.faces
    area = mesh.face_areas
    if lumped:
        diag = np.bincount(f.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
        if np.any(diag <= 0):
            raise DegenerateMesh(f"{mesh.name}: {np.count_nonzero(diag <= 0)} isolated vertices have zero mass")
        M = sparse.diags(diag).tocsr()
    else:
        rows, cols, vals = [], [], []
        for a in range(3):
            for b in range(3):
                rows.append(f[:, a])
                cols.append(f[:, b])
                vals.append(area / (6.0 if a == b else 12.0))
        M = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
    mesh._cache[key] = M
    return M


# ---------------------------------------------------------------------------
# geodesics


def graph_distances(n: int, edges: np.ndarray, lengths: np.ndarray, sources) -> np.ndarray:
    """Dijkstra distances over an undirected weighted edge graph.

    Returns an array of shape ``(len(sources), n)`` (or ``(n,)`` for a scalar
    source) with ``inf`` where a vertex is unreachable.
    """
    edges = np.asarray(edges, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.float64)
    G = sparse.coo_matrix((lengths, (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    return csgraph.dijkstra(G, directed=False, indices=sources)


def geodesic_distances(mesh: TriangleMesh, source) -> np.ndarray:
    """Edge-graph geodesic distances from ``source`` (a vertex or list of vertices)."""
    src = np.asarray(source)
    if np.any(src < 0) or np.any(src >= mesh.n_vertices):
        raise IndexOutOfRange(f"source vertex outside [0, {mesh.n_vertices})")
    d = graph_distances(mesh.n_vertices, mesh.edges, mesh.edge_lengths, source)
    unreachable = int(np.count_nonzero(~np.isfinite(d)))
    if unreachable:
        warnings.warn(f"{mesh.name}: {unreachable} vertex distance(s) unreachable (disconnected mesh)",
                      DisconnectedMeshWarning, stacklevel=2)
    return d
