"""Laplace-Beltrami and elastic (membrane + bending) bases, hybrid bases, projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import EigensolveFailure, KTooLarge, NotPositiveDefinite, ShapeMismatch
from .mesh import TriangleMesh, cotangent_laplacian, mass_matrix

DENSE_LIMIT = 2000
CLUSTER_RTOL = 1e-8


class BasisKind(str, Enum):
    LB = "lb"
    ELASTIC = "elastic"


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Mass-orthonormal eigenfunctions of a shape.

    ``functions`` is (n, k), ``eigenvalues`` is ascending and ``mass`` is the
    mesh mass matrix the functions are orthonormal under.
    """

    functions: np.ndarray
    eigenvalues: np.ndarray
    mass: sparse.spmatrix
    kind: BasisKind
    solver: str = "dense"
    bending_weight: float = 0.0
    clusters: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.functions.shape[0]

    @property
    def k(self) -> int:
        return self.functions.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        """Reduced mass ``Phi^T M Phi`` (identity up to round-off)."""
        g = self.functions.T @ (self.mass @ self.functions)
        return 0.5 * (g + g.T)

    @cached_property
    def pinv(self) -> np.ndarray:
        """Mass-weighted pseudo-inverse ``(Phi^T M Phi)^-1 Phi^T M``, shape (k, n)."""
        return scipy.linalg.solve(self.gram, (self.mass @ self.functions).T, assume_a="pos")

    def orthonormality_residual(self) -> float:
        return float(np.linalg.norm(self.gram - np.eye(self.k)))


@dataclass(frozen=True, eq=False)
class HybridBasis:
    lb: SpectralBasis
    elastic: SpectralBasis

    def __post_init__(self):
        if self.lb.n != self.elastic.n:
            raise ShapeMismatch("LB and elastic bases live on different meshes")

    @property
    def k_lb(self) -> int:
        return self.lb.k

    @property
    def k_elastic(self) -> int:
        return self.elastic.k

    @property
    def k(self) -> int:
        return self.lb.k + self.elastic.k

    @property
    def n(self) -> int:
        return self.lb.n

    @cached_property
    def concatenated(self) -> np.ndarray:
        return np.hstack([self.lb.functions, self.elastic.functions])

    @cached_property
    def pinv(self) -> np.ndarray:
        """Block-wise pseudo-inverse, each family projected separately."""
        return np.vstack([self.lb.pinv, self.elastic.pinv])

    @property
    def reduced_mass(self) -> np.ndarray:
        return reduced_mass(self.elastic)


def reduced_mass(basis: SpectralBasis) -> np.ndarray:
    """``Psi^T M Psi`` for an elastic basis, checked symmetric positive definite."""
    Mk = basis.gram
    w = np.linalg.eigvalsh(Mk)
    if w[0] <= 0:
        raise NotPositiveDefinite(f"reduced mass has smallest eigenvalue {w[0]:.3e}")
    return Mk


def _find_clusters(eigenvalues: np.ndarray) -> tuple:
    groups = []
    start = 0
    for q in range(1, len(eigenvalues) + 1):
        if q == len(eigenvalues) or (
            eigenvalues[q] - eigenvalues[q - 1] > CLUSTER_RTOL * max(1.0, abs(eigenvalues[q]))
        ):
            if q - start > 1:
                groups.append((start, q))
            start = q
    return tuple(groups)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    for q in range(vecs.shape[1]):
        col = vecs[:, q]
        thresh = 1e-10 * np.abs(col).max()
        nz = np.flatnonzero(np.abs(col) > thresh)
        if nz.size and col[nz[0]] < 0:
            vecs[:, q] = -col
    return vecs


def generalized_eigenpairs(A: sparse.spmatrix, M: sparse.spmatrix, k: int, solver: str = "auto"):
    """Smallest ``k`` eigenpairs of the symmetric pencil (A, M), M-orthonormal."""
    n = A.shape[0]
    if k < 1 or k >= n:
        raise KTooLarge(f"need 1 <= k < n, got k={k}, n={n}")
    if solver == "auto":
        solver = "dense" if n <= DENSE_LIMIT else "shift-invert"
    try:
        if solver == "dense":
            vals, vecs = scipy.linalg.eigh(A.toarray(), M.toarray(), subset_by_index=[0, k - 1])
        elif solver == "shift-invert":
            # shift slightly below zero so (A - sigma M) is positive definite
            sigma = -1e-8 * abs(A.diagonal()).max()
            vals, vecs = splinalg.eigsh(A.tocsc(), k=k, M=M.tocsc(), sigma=sigma, which="LM")
            order = np.argsort(vals)
            vals, vecs = vals[order], vecs[:, order]
            # re-orthonormalise against M
            G = vecs.T @ (M @ vecs)
            L = np.linalg.cholesky(0.5 * (G + G.T))
            vecs = np.linalg.solve(L, vecs.T).T
        else:
            raise ValueError(f"unknown eigensolver {solver!r}")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, splinalg.ArpackError) as exc:
        raise EigensolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(vecs)):
        raise EigensolveFailure("eigensolver returned non-finite values")
    vals = np.where(np.abs(vals) < 1e-9 * max(1.0, abs(vals).max()), 0.0, vals)
    return vals, np.ascontiguousarray(_fix_signs(np.array(vecs))), solver


def compute_lb_basis(mesh: TriangleMesh, k: int, lumped: bool = True, solver: str = "auto") -> SpectralBasis:
    """First ``k`` eigenpairs of the cotangent Laplacian against the mass matrix."""
    W = cotangent_laplacian(mesh)
    M = mass_matrix(mesh, lumped=lumped)
    vals, vecs, used = generalized_eigenpairs(W, M, k, solver)
    return SpectralBasis(vecs, vals, M, BasisKind.LB, used, 0.0, _find_clusters(vals))


def elastic_operator(mesh: TriangleMesh, bending_weight: float = 1.0) -> sparse.csr_matrix:
    """Membrane + bending surrogate ``W + w * W M^-1 W`` (lumped M)."""
    W = cotangent_laplacian(mesh)
    if bending_weight == 0:
        return W
    Minv = sparse.diags(1.0 / mass_matrix(mesh, lumped=True).diagonal())
    H = W + bending_weight * (W @ Minv @ W)
    H = 0.5 * (H + H.T)
    return H.tocsr()


def compute_elastic_basis(mesh: TriangleMesh, k: int, bending_weight: float = 1.0,
                          lumped: bool = True, solver: str = "auto") -> SpectralBasis:
    if bending_weight < 0:
        raise ValueError("bending_weight must be non-negative")
    H = elastic_operator(mesh, bending_weight)
    M = mass_matrix(mesh, lumped=lumped)
    vals, vecs, used = generalized_eigenpairs(H, M, k, solver)
    return SpectralBasis(vecs, vals, M, BasisKind.ELASTIC, used, float(bending_weight), _find_clusters(vals))


def compute_hybrid_basis(mesh: TriangleMesh, k_lb: int, k_elastic: int, bending_weight: float = 1.0,
                         lumped: bool = True, solver: str = "auto") -> HybridBasis:
    return HybridBasis(
        compute_lb_basis(mesh, k_lb, lumped=lumped, solver=solver),
        compute_elastic_basis(mesh, k_elastic, bending_weight, lumped=lumped, solver=solver),
    )


def project_features(basis: HybridBasis | SpectralBasis, F: np.ndarray) -> np.ndarray:
    """Spectral coefficients of ``F`` in ``basis`` (mass-weighted least squares).

    For a hybrid basis each family is projected on its own and the results
    are stacked, giving a ``(k_lb + k_elastic, d)`` matrix.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != basis.n:
        raise ShapeMismatch(f"features have {F.shape[0]} rows, basis has {basis.n} vertices")
    return basis.pinv @ F
