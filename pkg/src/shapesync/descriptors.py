"""Per-vertex feature matrices: wave kernel signatures, raw coordinates, or external."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InsufficientSpectrum, NonFinite, ShapeMismatch
from .mesh import TriangleMesh
from .spectral import SpectralBasis

DEFAULT_WKS_DIM = 128
DEFAULT_SIGMA_SCALE = 7.0


class Provenance(str, Enum):
    WKS = "wks"
    XYZ = "xyz"
    EXTERNAL = "external"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ShapeMismatch(f"features must be (n, d) with d >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFinite("feature matrix has non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]


def wave_kernel_signature(basis: SpectralBasis, d: int = DEFAULT_WKS_DIM,
                          sigma_scale: float = DEFAULT_SIGMA_SCALE) -> np.ndarray:
    """WKS with ``d`` log-spaced energies between the first and last nonzero eigenvalue.

    Each energy column is a Gaussian-weighted average of squared
    eigenfunctions, then scaled to unit L2 norm over the vertices.
    """
    if basis.k < 8:
        raise InsufficientSpectrum(f"WKS needs at least 8 eigenpairs, basis has {basis.k}")
    evals = basis.eigenvalues[1:]
    if np.any(evals <= 0):
        raise InsufficientSpectrum("WKS needs positive eigenvalues beyond the first")
    log_e = np.log(evals)
    lo, hi = log_e[0], log_e[-1]
    if hi - lo <= 0:
        raise InsufficientSpectrum("eigenvalue range is degenerate")
    energies = np.linspace(lo, hi, d)
    sigma = sigma_scale * (hi - lo) / d
    weights = np.exp(-((energies[None, :] - log_e[:, None]) ** 2) / (2.0 * sigma ** 2))  # (k-1, d)
    weights /= weights.sum(axis=0, keepdims=True)
    sq = basis.functions[:, 1:] ** 2
    desc = sq @ weights
    desc /= np.linalg.norm(desc, axis=0, keepdims=True)
    return desc


def compute_descriptors(basis: SpectralBasis | None, kind: Provenance | str = Provenance.WKS,
                        d: int = DEFAULT_WKS_DIM, sigma_scale: float = DEFAULT_SIGMA_SCALE,
                        mesh: TriangleMesh | None = None) -> FeatureMatrix:
    kind = Provenance(kind)
    if kind is Provenance.WKS:
        if basis is None:
            raise InsufficientSpectrum("WKS needs a Laplace-Beltrami basis")
        return FeatureMatrix(wave_kernel_signature(basis, d, sigma_scale), Provenance.WKS)
    if kind is Provenance.XYZ:
        if mesh is None:
            raise ValueError("XYZ descriptors need the mesh")
        return FeatureMatrix(mesh.vertices.copy(), Provenance.XYZ)
    raise ValueError("external features are loaded, not computed; use external_features()")


def external_features(values: np.ndarray, n_vertices: int | None = None) -> FeatureMatrix:
    values = np.asarray(values, dtype=np.float64)
    if n_vertices is not None and values.shape[0] != n_vertices:
        raise ShapeMismatch(f"external features have {values.shape[0]} rows, mesh has {n_vertices} vertices")
    return FeatureMatrix(values, Provenance.EXTERNAL)
