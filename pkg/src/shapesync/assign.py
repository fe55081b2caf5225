"""Soft and hard point maps, Sinkhorn universe assignments, hardening and composition."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import InfeasibleAssignment, NonFinite, ShapeMismatch, UniverseSizeMismatch

DEFAULT_TAU = 0.07
DEFAULT_SINKHORN_ITERS = 30
HUNGARIAN_LIMIT = 512


class MapMode(str, Enum):
    SOFT = "soft"
    HARD = "hard"


@dataclass(frozen=True, eq=False)
class PointMap:
    """Correspondence matrix with rows indexing ``source`` vertices and columns ``target`` vertices."""

    weights: np.ndarray
    mode: MapMode
    source: str = ""
    target: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def indices(self) -> np.ndarray:
        """Target index per source row (argmax; exact for hard maps)."""
        return np.argmax(self.weights, axis=1)

    @classmethod
    def from_indices(cls, indices, n_target: int, source: str = "", target: str = "", **metadata) -> "PointMap":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n_target):
            raise ShapeMismatch(f"map index outside [0, {n_target})")
        W = np.zeros((idx.size, n_target))
        W[np.arange(idx.size), idx] = 1.0
        return cls(W, MapMode.HARD, source, target, dict(metadata))

    def check(self, atol: float = 1e-6) -> None:
        """Raise ``ValueError`` unless the map satisfies its mode's constraints."""
        W = self.weights
        if self.mode is MapMode.SOFT:
            if np.any(W < 0) or np.any(np.abs(W.sum(axis=1) - 1.0) > atol):
                raise ValueError("soft map rows must be non-negative and sum to 1")
        else:
            if not np.all((W == 0) | (W == 1)) or np.any(W.sum(axis=1) != 1):
                raise ValueError("hard map needs exactly one 1 per row")
            if W.shape[1] >= W.shape[0] and not self.metadata.get("fallback_rows") and np.any(W.sum(axis=0) > 1):
                raise ValueError("hard map is not injective")


@dataclass(frozen=True, eq=False)
class UniverseAssignment:
    soft: np.ndarray
    hard: np.ndarray
    shape: str = ""

    def __post_init__(self):
        if self.soft.shape != self.hard.shape:
            raise ShapeMismatch("soft and hard assignments differ in shape")

    @property
    def c(self) -> int:
        return self.soft.shape[1]

    @property
    def n(self) -> int:
        return self.soft.shape[0]

    @property
    def hard_indices(self) -> np.ndarray:
        return np.argmax(self.hard, axis=1)

    def check(self, atol: float = 1e-6) -> None:
        if np.any(np.abs(self.soft.sum(axis=1) - 1) > atol) or np.any(self.soft.sum(axis=0) > 1 + atol):
            raise ValueError("soft assignment violates row/column constraints")
        H = self.hard
        if not np.all((H == 0) | (H == 1)) or np.any(H.sum(axis=1) != 1) or np.any(H.sum(axis=0) > 1):
            raise ValueError("hard assignment is not a partial permutation")


def _features(F) -> np.ndarray:
    return np.asarray(getattr(F, "values", F), dtype=np.float64)


def soft_pointmap(F_i, F_j, tau: float = DEFAULT_TAU, source: str = "", target: str = "") -> PointMap:
    """Row-softmax of feature similarities ``F_i F_j^T / tau`` (n_i x n_j)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    A, B = _features(F_i), _features(F_j)
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatch(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    S = (A @ B.T) / tau
    S -= S.max(axis=1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=1, keepdims=True)
    return PointMap(P, MapMode.SOFT, source, target)


# ---------------------------------------------------------------------------
# Sinkhorn


def _sinkhorn_log(scores, iterations, temperature, tape=None):
    """Alternating row / column scaling in the log domain; ends on a column step."""
    L = np.asarray(scores, dtype=np.float64) / temperature
    for _ in range(iterations):
        if tape is not None:
            tape.append(("row", L))
        L = L - logsumexp(L, axis=-1, keepdims=True)
        if tape is not None:
            tape.append(("col", L))
        # columns holding more than one unit of mass are scaled down
        L = L - np.maximum(logsumexp(L, axis=-2, keepdims=True), 0.0)
    return L


def _fill_rows(Q):
    """Top rows back up to unit mass using the columns' spare capacity.

    ``Q`` has column sums <= 1. Each row's deficit ``1 - sum_u Q[v, u]`` is
    spread over the columns in proportion to their slack ``1 - sum_v Q[v, u]``.
    Because the total slack is at least the total deficit whenever there are
    at least as many columns as rows, columns stay <= 1 while rows become
    exactly 1. With fewer columns than rows the rows are simply rescaled.
    """
    deficit = 1.0 - Q.sum(axis=-1, keepdims=True)
    slack = 1.0 - Q.sum(axis=-2, keepdims=True)
    total = slack.sum(axis=-1, keepdims=True)
    n, c = Q.shape[-2:]
    if c < n:
        return Q / Q.sum(axis=-1, keepdims=True), None
    safe = np.where(total > 0, total, 1.0)
    return Q + np.where(total > 0, deficit * slack / safe, 0.0), (deficit, slack, safe, total > 0)


def sinkhorn(scores, iterations: int = DEFAULT_SINKHORN_ITERS, temperature: float = DEFAULT_TAU) -> np.ndarray:
    """Partial Sinkhorn normalisation of ``exp(scores / temperature)``.

    Rows are scaled to sum to one and columns to sum to at most one,
    alternately, in the log domain. The unused capacity of each column acts
    as a slack cell; on return each row's remaining deficit is drawn from that
    slack (see ``_fill_rows``), so for ``c >= n`` the output always has unit
    row sums and column sums <= 1. Leading batch dimensions are allowed.
    """
    S = np.asarray(scores, dtype=np.float64)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(S)):
        raise NonFinite("sinkhorn scores must be finite")
    return _fill_rows(np.exp(_sinkhorn_log(S, iterations, temperature)))[0]


def sinkhorn_vjp(scores, grad_output, iterations: int = DEFAULT_SINKHORN_ITERS,
                 temperature: float = DEFAULT_TAU) -> np.ndarray:
    """Gradient w.r.t. ``scores`` of ``sum(grad_output * sinkhorn(scores))``.

    Back-propagates through the row fill and the unrolled log-domain iterations.
    """
    tape: list = []
    L = _sinkhorn_log(np.asarray(scores, dtype=np.float64), iterations, temperature, tape)
    Q = np.exp(L)
    G = np.asarray(grad_output, dtype=np.float64)
    _, aux = _fill_rows(Q)
    if aux is None:
        rows = Q.sum(axis=-1, keepdims=True)
        P = Q / rows
        gQ = (G - np.sum(G * P, axis=-1, keepdims=True)) / rows
    else:
        deficit, slack, safe, active = aux
        g_def = np.sum(G * slack, axis=-1, keepdims=True) / safe
        g_slack = np.sum(G * deficit, axis=-2, keepdims=True) / safe
        g_total = -np.sum(G * deficit * slack, axis=(-2, -1), keepdims=True) / safe ** 2
        gQ = G - np.where(active, g_def + g_slack + g_total, 0.0)
    g = Q * gQ
    for kind, x in reversed(tape):
        if kind == "row":
            soft = np.exp(x - logsumexp(x, axis=-1, keepdims=True))
            g = g - soft * g.sum(axis=-1, keepdims=True)
        else:
            lse = logsumexp(x, axis=-2, keepdims=True)
            soft = np.exp(x - lse)
            g = g - np.where(lse > 0, soft * g.sum(axis=-2, keepdims=True), 0.0)
    return g / temperature


def sinkhorn_vjp_fd(scores, grad_output, iterations: int = DEFAULT_SINKHORN_ITERS,
                    temperature: float = DEFAULT_TAU, step: float = 1e-6) -> np.ndarray:
    """Finite-difference counterpart of :func:`sinkhorn_vjp` (central differences per score)."""
    S = np.asarray(scores, dtype=np.float64)
    G = np.asarray(grad_output, dtype=np.float64)
    n, c = S.shape
    eye = np.eye(n * c).reshape(n * c, n, c) * step
    plus = sinkhorn(S[None] + eye, iterations, temperature)
    minus = sinkhorn(S[None] - eye, iterations, temperature)
    return (np.einsum("bij,ij->b", plus - minus, G) / (2 * step)).reshape(n, c)


# ---------------------------------------------------------------------------
# hardening and composition


def harden(soft, method: str = "auto") -> np.ndarray:
    """Binary partial permutation maximising the total selected weight.

    Exact linear assignment for up to 512 rows, greedy descending-weight
    selection above that (or when ``method="greedy"``).
    """
    W = np.asarray(soft, dtype=np.float64)
    n, c = W.shape
    if c < n:
        raise InfeasibleAssignment(f"{n} rows cannot be assigned injectively to {c} columns")
    if method == "auto":
        method = "hungarian" if n <= HUNGARIAN_LIMIT else "greedy"
    out = np.zeros_like(W)
    if method == "hungarian":
        rows, cols = linear_sum_assignment(W, maximize=True)
        out[rows, cols] = 1.0
    elif method == "greedy":
        out[np.arange(n), greedy_assignment(W)] = 1.0
    else:
        raise ValueError(f"unknown hardening method {method!r}")
    return out


def greedy_assignment(W: np.ndarray) -> np.ndarray:
    n, c = W.shape
    flat_rows = np.repeat(np.arange(n), c)
    flat_cols = np.tile(np.arange(c), n)
    order = np.lexsort((flat_cols, flat_rows, -W.ravel()))
    row_used = np.zeros(n, bool)
    col_used = np.zeros(c, bool)
    out = np.full(n, -1, dtype=np.int64)
    remaining = n
    for e in order:
        r, k = flat_rows[e], flat_cols[e]
        if row_used[r] or col_used[k]:
            continue
        row_used[r] = col_used[k] = True
        out[r] = k
        remaining -= 1
        if remaining == 0:
            break
    return out


def universe_assignment(scores, iterations: int = DEFAULT_SINKHORN_ITERS, temperature: float = DEFAULT_TAU,
                        shape: str = "", method: str = "auto") -> UniverseAssignment:
    soft = sinkhorn(scores, iterations, temperature)
    return UniverseAssignment(soft, harden(soft, method), shape)


def compose_universe(pi_i: UniverseAssignment, pi_j: UniverseAssignment, mode: MapMode | str = MapMode.HARD) -> PointMap:
    """Pairwise map ``Pi_i Pi_j^T`` through the shared universe.

    In hard mode a vertex of shape i whose universe point is not claimed by
    shape j falls back to the claimed point with the highest soft score;
    those rows are listed in ``metadata["fallback_rows"]``.
    """
    mode = MapMode(mode)
    if pi_i.c != pi_j.c:
        raise UniverseSizeMismatch(f"universe sizes differ: {pi_i.c} vs {pi_j.c}")
    if mode is MapMode.SOFT:
        return PointMap(pi_i.soft @ pi_j.soft.T, MapMode.SOFT, pi_i.shape, pi_j.shape)

    owner = np.full(pi_j.c, -1, dtype=np.int64)
    owner[pi_j.hard_indices] = np.arange(pi_j.n)
    target = owner[pi_i.hard_indices]
    fallback = np.flatnonzero(target < 0)
    if fallback.size:
        claimed = np.flatnonzero(owner >= 0)
        best = claimed[np.argmax(pi_i.soft[np.ix_(fallback, claimed)], axis=1)]
        target[fallback] = owner[best]
    return PointMap.from_indices(target, pi_j.n, pi_i.shape, pi_j.shape, fallback_rows=fallback.tolist())


def select_universe_size(collection, reference=None) -> int:
    """Universe point count: the reference shape's vertex count, else the collection maximum.

    ``collection`` holds meshes, :class:`ShapeData` objects or plain vertex
    counts; ``reference`` is a shape name or a position in the collection.
    """
    if len(collection) == 0:
        raise ValueError("empty collection")

    def count(s):
        if isinstance(s, (int, np.integer)):
            return int(s)
        return int(getattr(s, "n_vertices", None) or s.n)

    if reference is None:
        return max(count(s) for s in collection)
    if isinstance(reference, (int, np.integer)):
        return count(collection[reference])
    for s in collection:
        if getattr(s, "name", None) == reference:
            return count(s)
    raise KeyError(f"reference shape {reference!r} not in collection")
