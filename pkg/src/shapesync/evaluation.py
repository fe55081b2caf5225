"""Correspondence metrics and an executable check of universe-map cycle consistency."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DisconnectedMeshWarning, MissingMap, ShapeMismatch
from .fmap import universe_fmap
from .mesh import TriangleMesh, graph_distances

EXACT_DIAMETER_LIMIT = 3000


class Normalization(str, Enum):
    SQRT_AREA = "sqrt_area"
    DIAMETER = "diameter"


@dataclass(frozen=True, eq=False)
class ErrorSummary:
    """Per-vertex geodesic errors (x100, normalised) and their mean.

    Vertices whose predicted and true targets lie in different components are
    left out of ``errors``; their source indices are in ``excluded``.
    """

    mean_geo_x100: float
    errors: np.ndarray
    normalization: Normalization = Normalization.SQRT_AREA
    scale: float = 1.0
    excluded: tuple = ()

    def check(self) -> None:
        if np.any(self.errors < 0):
            raise AssertionError("negative geodesic error")
        mean = float(self.errors.mean()) if self.errors.size else 0.0
        if abs(mean - self.mean_geo_x100) > 1e-12 * max(1.0, abs(mean)):
            raise AssertionError("mean does not match per-vertex errors")

    def to_row(self) -> dict:
        return {"mean_geo_x100": self.mean_geo_x100, "n_vertices": int(self.errors.size),
                "n_excluded": len(self.excluded), "normalization": self.normalization.value,
                "scale": self.scale}


@dataclass(frozen=True, eq=False)
class PckCurve:
    thresholds: np.ndarray
    proportions: np.ndarray
    auc: float

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds.tolist(), self.proportions.tolist()))


def _indices(m) -> np.ndarray:
    if hasattr(m, "weights"):
        return m.indices
    return np.asarray(m, dtype=np.int64).reshape(-1)


def geodesic_diameter(mesh: TriangleMesh) -> float:
    """Largest finite edge-graph distance.

    Exact up to ``EXACT_DIAMETER_LIMIT`` vertices; above that a double-sweep
    lower bound (farthest point of the farthest point from vertex 0).
    """
    n = mesh.n_vertices
    if n <= EXACT_DIAMETER_LIMIT:
        D = graph_distances(n, mesh.edges, mesh.edge_lengths, np.arange(n))
        return float(np.max(D[np.isfinite(D)]))
    d0 = graph_distances(n, mesh.edges, mesh.edge_lengths, 0)
    far = int(np.argmax(np.where(np.isfinite(d0), d0, -1)))
    d1 = graph_distances(n, mesh.edges, mesh.edge_lengths, far)
    return float(np.max(d1[np.isfinite(d1)]))


def geodesic_error(pred, gt, target_mesh: TriangleMesh,
                   normalization: Normalization | str = Normalization.SQRT_AREA) -> ErrorSummary:
    """Mean geodesic distance x100 between predicted and true targets on ``target_mesh``.

    ``pred`` and ``gt`` are hard point maps (PointMap or index arrays) from
    the same source shape to ``target_mesh``.
    """
    normalization = Normalization(normalization)
    p, g = _indices(pred), _indices(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred has {p.size} rows, gt has {g.size}")
    n = target_mesh.n_vertices
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= n):
        raise ShapeMismatch(f"map targets outside [0, {n})")
    if normalization is Normalization.SQRT_AREA:
        scale = float(np.sqrt(target_mesh.surface_area))
    else:
        scale = geodesic_diameter(target_mesh)

    raw = np.zeros(p.size)
    wrong = np.flatnonzero(p != g)
    if wrong.size:
        srcs, inv = np.unique(g[wrong], return_inverse=True)
        D = graph_distances(n, target_mesh.edges, target_mesh.edge_lengths, srcs)
        raw[wrong] = D[inv, p[wrong]]
    ok = np.isfinite(raw)
    excluded = tuple(np.flatnonzero(~ok).tolist())
    if excluded:
        warnings.warn(f"{len(excluded)} vertices excluded: targets in different components",
                      DisconnectedMeshWarning, stacklevel=2)
    errors = 100.0 * raw[ok] / scale
    mean = float(errors.mean()) if errors.size else 0.0
    return ErrorSummary(mean, errors, normalization, scale, excluded)


def pck_auc(errors, max_threshold: float, samples: int = 101) -> PckCurve:
    """Fraction of errors ``<= t`` on ``samples`` evenly spaced thresholds in ``[0, max_threshold]``.

    The AUC is the trapezoid integral divided by ``max_threshold``.
    """
    if max_threshold <= 0:
        raise ValueError("max_threshold must be positive")
    if samples < 2:
        raise ValueError("samples must be >= 2")
    e = np.asarray(getattr(errors, "errors", errors), dtype=np.float64).reshape(-1)
    t = np.linspace(0.0, max_threshold, samples)
    if e.size == 0:
        prop = np.zeros_like(t)
    else:
        e_sorted = np.sort(e)
        prop = np.searchsorted(e_sorted, t, side="right") / e.size
    auc = float(np.trapezoid(prop, t) / max_threshold) if hasattr(np, "trapezoid") \
        else float(np.trapz(prop, t) / max_threshold)
    return PckCurve(t, prop, auc)


def compose_indices(maps: dict, cycle) -> np.ndarray:
    """Follow the hard maps ``cycle[0] -> cycle[1] -> ... -> cycle[0]``."""
    cycle = list(cycle)
    cur = None
    for a, b in zip(cycle, cycle[1:] + cycle[:1]):
        if (a, b) not in maps:
            raise MissingMap(f"no map from {a} to {b}")
        m = _indices(maps[(a, b)])
        cur = m if cur is None else m[cur]
    return cur


def cycle_deviation(maps: dict, cycles, meshes, normalization=Normalization.SQRT_AREA) -> list[float]:
    """Mean geodesic deviation (x100) of each composed cycle from the identity on its start mesh.

    ``maps[(a, b)]`` is the hard map from shape a to shape b; ``meshes`` is
    indexable by the same keys.
    """
    out = []
    for cycle in cycles:
        comp = compose_indices(maps, cycle)
        mesh = meshes[cycle[0]]
        ident = np.arange(mesh.n_vertices)
        if comp.size != ident.size:
            raise ShapeMismatch("composed cycle does not cover the start mesh")
        out.append(geodesic_error(comp, ident, mesh, normalization).mean_geo_x100)
    return out


def verify_theorem1(coefficients, tolerance: float = 1e-6, k_lb: int | None = None) -> dict:
    """Check that exact universe maps compose to the identity on every 3-cycle.

    Builds ``C_ij = A_j A_i^+`` for all ordered pairs and reports the largest
    data residual ``||C_ij A_i - A_j||`` and cycle residual
    ``||C_ki C_jk C_ij A_i - A_i||``. The check passes when the data
    residual exceeds ``tolerance`` (premise not met) or the cycle residual is
    within it.
    """
    A = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in coefficients]
    if len({a.shape for a in A}) > 1:
        raise ShapeMismatch("coefficient matrices differ in shape")
    N = len(A)
    C = {}
    for i, j in itertools.permutations(range(N), 2):
        C[(i, j)] = universe_fmap(A[i], A[j], k_lb).full
    data = 0.0
    for (i, j), Cij in C.items():
        data = max(data, float(np.linalg.norm(Cij @ A[i] - A[j])))
    cyc = 0.0
    n_cycles = 0
    for i, j, k in itertools.permutations(range(N), 3):
        R = C[(k, i)] @ C[(j, k)] @ C[(i, j)] @ A[i] - A[i]
        cyc = max(cyc, float(np.linalg.norm(R)))
        n_cycles += 1
    passed = bool(data > tolerance or cyc <= tolerance)
    return {"max_data_residual": data, "max_cycle_residual": cyc, "n_shapes": N, "n_cycles": n_cycles,
            "tolerance": tolerance, "pass": passed}
