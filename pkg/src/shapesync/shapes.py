"""Per-shape bundle of mesh, hybrid basis, features and spectral coefficients."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .descriptors import FeatureMatrix
from .errors import ShapeMismatch
from .mesh import TriangleMesh
from .spectral import HybridBasis, project_features


@dataclass(frozen=True, eq=False)
class ShapeData:
    mesh: TriangleMesh
    basis: HybridBasis
    features: FeatureMatrix

    def __post_init__(self):
        if self.basis.n != self.mesh.n_vertices or self.features.n != self.mesh.n_vertices:
            raise ShapeMismatch(f"{self.mesh.name}: basis/features do not match the mesh vertex count")

    @property
    def name(self) -> str:
        return self.mesh.name

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    @cached_property
    def coefficients(self) -> np.ndarray:
        """Hybrid spectral coefficients, LB rows first then elastic rows."""
        return project_features(self.basis, self.features.values)

    @property
    def coefficients_lb(self) -> np.ndarray:
        return self.coefficients[: self.basis.k_lb]

    @property
    def coefficients_elastic(self) -> np.ndarray:
        return self.coefficients[self.basis.k_lb:]

    @cached_property
    def embedded_features(self) -> np.ndarray:
        """Features smoothed through the hybrid basis, ``Phi~ A`` (n, d)."""
        return self.basis.concatenated @ self.coefficients
