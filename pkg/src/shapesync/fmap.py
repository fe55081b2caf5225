"""Regularised hybrid functional maps and conversions to and from point maps.

A functional map between hybrid bases is block diagonal: an LB block ``c11``
and an elastic block ``c22``. Maps act on coefficient columns, so ``C_ij``
sends coefficients of shape i to coefficients of shape j.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.sparse import linalg as splinalg

from .errors import NonFinite, NotPositiveDefinite, RankDeficient, ShapeMismatch, SingularSystem
from .formats import read_fmat, read_json, write_fmat, write_json
from .spectral import HybridBasis

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_LB = 100.0
DEFAULT_LAMBDA_ELASTIC = 50.0
KRON_LIMIT = 64


@dataclass(frozen=True, eq=False)
class FunctionalMap:
    c11: np.ndarray
    c22: np.ndarray
    source: str = ""
    target: str = ""

    def __post_init__(self):
        c11 = np.atleast_2d(np.asarray(self.c11, dtype=np.float64))
        c22 = np.asarray(self.c22, dtype=np.float64).reshape(np.shape(self.c22) if np.size(self.c22) else (0, 0))
        for name, c in (("c11", c11), ("c22", c22)):
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ShapeMismatch(f"{name} must be square, got {c.shape}")
            if not np.all(np.isfinite(c)):
                raise NonFinite(f"{name} has non-finite entries")
        object.__setattr__(self, "c11", c11)
        object.__setattr__(self, "c22", c22)

    @property
    def k_lb(self) -> int:
        return self.c11.shape[0]

    @property
    def k_elastic(self) -> int:
        return self.c22.shape[0]

    @property
    def blocks(self) -> tuple[np.ndarray, np.ndarray]:
        return self.c11, self.c22

    @property
    def full(self) -> np.ndarray:
        return scipy.linalg.block_diag(self.c11, self.c22)

    @classmethod
    def identity(cls, k_lb: int, k_elastic: int, source: str = "", target: str = "") -> "FunctionalMap":
        return cls(np.eye(k_lb), np.eye(k_elastic), source, target)

    def save(self, prefix, **meta) -> None:
        """Write ``<prefix>.c11.fmat``, ``<prefix>.c22.fmat`` and a ``<prefix>.json`` sidecar."""
        prefix = os.fspath(prefix)
        write_fmat(prefix + ".c11.fmat", self.c11)
        write_fmat(prefix + ".c22.fmat", self.c22)
        write_json(prefix + ".json", {"source": self.source, "target": self.target,
                                      "k_lb": self.k_lb, "k_elastic": self.k_elastic, **meta})

    @classmethod
    def load(cls, prefix) -> "FunctionalMap":
        prefix = os.fspath(prefix)
        meta = read_json(prefix + ".json")
        c11 = read_fmat(prefix + ".c11.fmat")
        c22 = read_fmat(prefix + ".c22.fmat")
        if c11.shape != (meta["k_lb"], meta["k_lb"]) or c22.shape != (meta["k_elastic"], meta["k_elastic"]):
            raise ShapeMismatch(f"{prefix}: block sizes disagree with the sidecar")
        return cls(c11, c22, meta.get("source", ""), meta.get("target", ""))

    def __matmul__(self, other: "FunctionalMap") -> "FunctionalMap":
        """Composition: ``(C_jk @ C_ij)`` maps i -> k."""
        return FunctionalMap(self.c11 @ other.c11, self.c22 @ other.c22, other.source, self.target)


# ---------------------------------------------------------------------------
# objectives


def lb_objective(C, A_i, A_j, evals_i, evals_j, lam) -> float:
    data = np.sum((C @ A_i - A_j) ** 2)
    reg = np.sum((C * evals_i[None, :] - evals_j[:, None] * C) ** 2)
    return float(data + lam * reg)


def _weighted_sq(X, M) -> float:
    return float(np.trace(X.T @ M @ X))


def elastic_objective(C, A_i, A_j, evals_i, evals_j, Mk, lam, hs_norm: str = "reduced_mass") -> float:
    R = C * evals_i[None, :] - evals_j[:, None] * C
    reg = _weighted_sq(R, Mk) if hs_norm == "reduced_mass" else float(np.sum(R ** 2))
    return _weighted_sq(C @ A_i - A_j, Mk) + lam * reg


# ---------------------------------------------------------------------------
# solvers


def _check_inputs(A_i, A_j, evals_i, evals_j):
    A_i = np.atleast_2d(np.asarray(A_i, dtype=np.float64))
    A_j = np.atleast_2d(np.asarray(A_j, dtype=np.float64))
    evals_i = np.asarray(evals_i, dtype=np.float64).ravel()
    evals_j = np.asarray(evals_j, dtype=np.float64).ravel()
    if A_i.shape != A_j.shape:
        raise ShapeMismatch(f"coefficient shapes differ: {A_i.shape} vs {A_j.shape}")
    k = A_i.shape[0]
    if evals_i.size != k or evals_j.size != k:
        raise ShapeMismatch(f"expected {k} eigenvalues per shape")
    for arr in (A_i, A_j, evals_i, evals_j):
        if not np.all(np.isfinite(arr)):
            raise NonFinite("functional map inputs must be finite")
    return A_i, A_j, evals_i, evals_j


def _spd_solve(S: np.ndarray, b: np.ndarray, prior: np.ndarray | None = None) -> np.ndarray:
    """Solve a symmetric PSD system, adding a trace-scaled jitter if it is singular.

    The jitter is a ridge centred on ``prior`` (zero by default), so among
    the many minimisers of a singular system the one nearest ``prior`` is
    returned.
    """
    S = 0.5 * (S + S.T)
    k = S.shape[0]
    scale = np.trace(S) / max(k, 1)
    for jitter in (0.0, 1e-12 * scale):
        try:
            A = S + jitter * np.eye(k) if jitter else S
            factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
            # a tiny pivot means the factorisation succeeded on a singular matrix
            piv = np.abs(np.diag(factor[0]))
            if jitter == 0.0 and piv.min() ** 2 <= 1e-13 * max(piv.max() ** 2, 1e-300):
                continue
            rhs = b + jitter * prior if (jitter and prior is not None) else b
            x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
            if np.all(np.isfinite(x)):
                return x
        except np.linalg.LinAlgError:
            continue
    raise SingularSystem("regularised functional map system is singular")


def solve_lb_map(A_i, A_j, evals_i, evals_j, lam: float = DEFAULT_LAMBDA_LB) -> np.ndarray:
    """Minimiser of ``||C A_i - A_j||^2 + lam ||C L_i - L_j C||^2``.

    The objective separates over rows of C; row q solves
    ``(A_i A_i^T + lam D_q) c_q = A_i a_jq`` with
    ``D_q = diag((evals_i - evals_j[q])^2)``. When a row system is singular
    (poor descriptors inside a repeated eigenvalue) the minimiser closest to
    the identity row is taken.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    A_i, A_j, evals_i, evals_j = _check_inputs(A_i, A_j, evals_i, evals_j)
    k = A_i.shape[0]
    gram = A_i @ A_i.T
    rhs = A_i @ A_j.T  # column q is A_i a_jq
    I = np.eye(k)
    C = np.empty((k, k))
    for q in range(k):
        D = (evals_i - evals_j[q]) ** 2
        S = gram + lam * np.diag(D)
        C[q] = _spd_solve(S, rhs[:, q], I[q])
    return C


def _elastic_system(A_i, A_j, evals_i, evals_j, Mk, lam, hs_norm):
    """Hessian (row-major vec) and right-hand side of the elastic objective."""
    k = A_i.shape[0]
    G = A_i @ A_i.T
    Li = np.diag(evals_i)
    Lj = np.diag(evals_j)
    I = np.eye(k)
    K = np.kron(Mk, G)
    if hs_norm == "reduced_mass":
        K += lam * (np.kron(Mk, Li @ Li) - np.kron(Mk @ Lj + Lj @ Mk, Li) + np.kron(Lj @ Mk @ Lj, I))
    else:
        K += lam * (np.kron(I, Li @ Li) - 2.0 * np.kron(Lj, Li) + np.kron(Lj @ Lj, I))
    rhs = (Mk @ A_j @ A_i.T).ravel()
    return K, rhs


def solve_elastic_map(A_i, A_j, evals_i, evals_j, Mk, lam: float = DEFAULT_LAMBDA_ELASTIC,
                      hs_norm: str = "reduced_mass") -> np.ndarray:
    """Minimiser of the reduced-mass weighted elastic objective.

    ``||C A_i - A_j||_M^2 + lam ||C L_i - L_j C||_HS^2`` where
    ``||X||_M^2 = tr(X^T M X)`` and the HS norm is the same weighted norm
    (``hs_norm="reduced_mass"``) or plain Frobenius (``"frobenius"``).
    A non-diagonal M couples the rows, so the normal equations are solved
    jointly over all k*k unknowns.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if hs_norm not in ("reduced_mass", "frobenius"):
        raise ValueError(f"unknown hs_norm {hs_norm!r}")
    A_i, A_j, evals_i, evals_j = _check_inputs(A_i, A_j, evals_i, evals_j)
    k = A_i.shape[0]
    Mk = np.asarray(Mk, dtype=np.float64)
    if Mk.shape != (k, k):
        raise ShapeMismatch(f"reduced mass must be {k}x{k}, got {Mk.shape}")
    if not np.allclose(Mk, Mk.T, atol=1e-9 * max(1.0, np.abs(Mk).max())):
        raise NotPositiveDefinite("reduced mass is not symmetric")
    Mk = 0.5 * (Mk + Mk.T)
    if np.linalg.eigvalsh(Mk)[0] <= 0:
        raise NotPositiveDefinite("reduced mass is not positive definite")

    if k == 0:
        return np.zeros((0, 0))
    if k <= KRON_LIMIT:
        K, rhs = _elastic_system(A_i, A_j, evals_i, evals_j, Mk, lam, hs_norm)
        return _spd_solve(K, rhs, np.eye(k).ravel()).reshape(k, k)

    G = A_i @ A_i.T
    HS = Mk if hs_norm == "reduced_mass" else np.eye(k)

    def apply(x):
        C = x.reshape(k, k)
        R = C * evals_i[None, :] - evals_j[:, None] * C
        Q = HS @ R
        out = Mk @ C @ G + lam * (Q * evals_i[None, :] - evals_j[:, None] * Q)
        return out.ravel()

    op = splinalg.LinearOperator((k * k, k * k), matvec=apply, dtype=np.float64)
    rhs = (Mk @ A_j @ A_i.T).ravel()
    x0 = solve_lb_map(A_i, A_j, evals_i, evals_j, lam).ravel()
    x, info = splinalg.cg(op, rhs, x0=x0, rtol=1e-13, atol=0.0, maxiter=20 * k * k)
    if info != 0:
        raise SingularSystem(f"conjugate gradients did not converge (info={info})")
    return x.reshape(k, k)


def solve_hybrid_map(shape_i, shape_j, lam_lb: float = DEFAULT_LAMBDA_LB,
                     lam_elastic: float = DEFAULT_LAMBDA_ELASTIC, hs_norm: str = "reduced_mass") -> FunctionalMap:
    """Block-diagonal map from ``shape_i`` to ``shape_j`` (both :class:`ShapeData`)."""
    bi, bj = shape_i.basis, shape_j.basis
    if bi.k_lb != bj.k_lb or bi.k_elastic != bj.k_elastic:
        raise ShapeMismatch("shapes use different basis sizes")
    if shape_i.features.d != shape_j.features.d:
        raise ShapeMismatch("shapes use different feature dimensions")
    c11 = solve_lb_map(shape_i.coefficients_lb, shape_j.coefficients_lb,
                       bi.lb.eigenvalues, bj.lb.eigenvalues, lam_lb)
    c22 = solve_elastic_map(shape_i.coefficients_elastic, shape_j.coefficients_elastic,
                            bi.elastic.eigenvalues, bj.elastic.eigenvalues,
                            bj.reduced_mass, lam_elastic, hs_norm)
    return FunctionalMap(c11, c22, shape_i.name, shape_j.name)


# ---------------------------------------------------------------------------
# conversions


def _weights(pointmap) -> np.ndarray:
    return np.asarray(getattr(pointmap, "weights", pointmap), dtype=np.float64)


def fmap_from_pointmap(pi_ji, basis_i: HybridBasis, basis_j: HybridBasis,
                       source: str = "", target: str = "") -> FunctionalMap:
    """Spectral representation of the point map ``pi_ji`` (n_j x n_i) as ``C_ij``.

    Each block is the mass-weighted least-squares solution of
    ``basis_j C = pi_ji basis_i`` within one basis family.
    """
    P = _weights(pi_ji)
    if P.shape != (basis_j.n, basis_i.n):
        raise ShapeMismatch(f"point map must be {basis_j.n}x{basis_i.n}, got {P.shape}")
    c11 = basis_j.lb.pinv @ (P @ basis_i.lb.functions)
    c22 = basis_j.elastic.pinv @ (P @ basis_i.elastic.functions)
    return FunctionalMap(c11, c22, source, target)


def nearest_neighbors(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Index of the closest ``reference`` row for each ``query`` row (lowest index on ties)."""
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    nq, nr = query.shape[0], reference.shape[0]
    out = np.empty(nq, dtype=np.int64)
    step = max(1, int(2e7 // max(1, nr * reference.shape[1])))
    for start in range(0, nq, step):
        block = query[start:start + step]
        d2 = np.sum((block[:, None, :] - reference[None, :, :]) ** 2, axis=2)
        out[start:start + step] = np.argmin(d2, axis=1)
    return out


def spectral_embedding(C: FunctionalMap, basis_j: HybridBasis) -> np.ndarray:
    """Rows of ``Phi~_j C_ij``: target vertices expressed in the source basis."""
    return np.hstack([basis_j.lb.functions @ C.c11, basis_j.elastic.functions @ C.c22])


def pointmap_from_fmap(C_ij: FunctionalMap, basis_i: HybridBasis, basis_j: HybridBasis) -> np.ndarray:
    """Hard point map from shape j to shape i as an index array of length n_j.

    Entry t is the vertex s of shape i minimising
    ``||(Phi~_j C_ij)[t] - Phi~_i[s]||``.
    """
    if C_ij.k_lb != basis_i.k_lb or C_ij.k_elastic != basis_i.k_elastic \
            or basis_i.k_lb != basis_j.k_lb or basis_i.k_elastic != basis_j.k_elastic:
        raise ShapeMismatch("functional map blocks do not match the bases")
    return nearest_neighbors(spectral_embedding(C_ij, basis_j), basis_i.concatenated)


def _check_full_row_rank(A: np.ndarray) -> None:
    s = np.linalg.svd(A, compute_uv=False)
    if A.shape[0] > A.shape[1] or s.size == 0 or s[-1] <= 1e-10:
        smin = s[-1] if s.size else 0.0
        raise RankDeficient(f"coefficients {A.shape} are not full row rank (smallest singular value {smin:.3e})")


def universe_fmap(A_i, A_j, k_lb: int | None = None, source: str = "", target: str = "") -> FunctionalMap:
    """``C_ij = A_j A_i^+`` computed per block (LB rows ``[:k_lb]``, elastic rows after)."""
    A_i = np.atleast_2d(np.asarray(A_i, dtype=np.float64))
    A_j = np.atleast_2d(np.asarray(A_j, dtype=np.float64))
    if A_i.shape != A_j.shape:
        raise ShapeMismatch(f"coefficient shapes differ: {A_i.shape} vs {A_j.shape}")
    _check_full_row_rank(A_i)
    k_lb = A_i.shape[0] if k_lb is None else k_lb
    blocks = []
    for sl in (slice(0, k_lb), slice(k_lb, None)):
        Ai, Aj = A_i[sl], A_j[sl]
        if Ai.shape[0] == 0:
            blocks.append(np.zeros((0, 0)))
            continue
        # A_i has full row rank, so A_i^+ = A_i^T (A_i A_i^T)^-1
        blocks.append(scipy.linalg.solve(Ai @ Ai.T, Ai @ Aj.T, assume_a="pos").T)
    return FunctionalMap(blocks[0], blocks[1], source, target)
