"""Unsupervised objectives over a shape collection, their gradients and a small optimiser.

All terms are sums over an ordered pair list ``(i, j), i != j``:

* bijectivity / orthogonality of the functional maps ``C_ij``, ``C_ji``;
* coupling between ``C_ij`` and the spectral image of the soft point map ``Pi_ji``;
* cycle consistency between the universe-aligned embeddings ``Pi_i^T Phi~_i A_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .assign import DEFAULT_SINKHORN_ITERS, DEFAULT_TAU, sinkhorn, sinkhorn_vjp, sinkhorn_vjp_fd
from .errors import ConfigError, MissingPair, NonFinite, ShapeMismatch
from .fmap import FunctionalMap

logger = logging.getLogger(__name__)


class CycleVariant(str, Enum):
    FROBENIUS = "frobenius"
    COSINE = "cosine"


class CouplingOrder(str, Enum):
    AS_PRINTED = "as_printed"
    TRANSPOSED = "transposed"


@dataclass(frozen=True)
class LossWeights:
    bij: float = 1.0
    orth: float = 1.0
    couple: float = 1.0
    cycle: float = 1.0

    def __post_init__(self):
        for name in ("bij", "orth", "couple", "cycle"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


# ---------------------------------------------------------------------------
# individual terms (value and gradient)


def bijectivity_term(X: np.ndarray, Y: np.ndarray):
    """``||XY - I||^2 + ||YX - I||^2`` and its gradients w.r.t. X and Y."""
    I = np.eye(X.shape[0])
    R1 = X @ Y - I
    R2 = Y @ X - I
    val = float(np.sum(R1 ** 2) + np.sum(R2 ** 2))
    gX = 2 * R1 @ Y.T + 2 * Y.T @ R2
    gY = 2 * X.T @ R1 + 2 * R2 @ X.T
    return val, gX, gY


def orthogonality_term(X: np.ndarray):
    """``||X^T X - I||^2`` and its gradient."""
    R = X.T @ X - np.eye(X.shape[1])
    return float(np.sum(R ** 2)), 4 * X @ R


def structural_loss(C_ij: FunctionalMap, C_ji: FunctionalMap) -> tuple[float, float]:
    """(bijectivity, orthogonality) summed over both blocks; the adjoint is the transpose."""
    if C_ij.c11.shape != C_ji.c11.shape or C_ij.c22.shape != C_ji.c22.shape:
        raise ShapeMismatch("functional maps have different block sizes")
    bij = orth = 0.0
    for X, Y in zip(C_ij.blocks, C_ji.blocks):
        if X.size == 0:
            continue
        bij += bijectivity_term(X, Y)[0]
        orth += orthogonality_term(X)[0] + orthogonality_term(Y)[0]
    return bij, orth


def _coupling_parts(C_ij: FunctionalMap, pi_ji: np.ndarray, basis_i, basis_j, order):
    order = CouplingOrder(order)
    P = np.asarray(getattr(pi_ji, "weights", pi_ji), dtype=np.float64)
    if P.shape != (basis_j.n, basis_i.n):
        raise ShapeMismatch(f"Pi_ji must be {basis_j.n}x{basis_i.n}, got {P.shape}")
    lb_target = basis_j.lb.pinv @ P @ basis_i.lb.functions
    if order is CouplingOrder.AS_PRINTED:
        if basis_i.n != basis_j.n:
            raise ShapeMismatch("as_printed coupling needs equal vertex counts; use coupling_order='transposed'")
        left, right = basis_i.elastic, basis_j.elastic
    else:
        left, right = basis_j.elastic, basis_i.elastic
    el_target = left.pinv @ P @ right.functions
    Mk = basis_j.elastic.gram
    return P, lb_target, el_target, Mk, left, right


def coupling_term(C_ij: FunctionalMap, pi_ji, basis_i, basis_j, order=CouplingOrder.AS_PRINTED):
    """Coupling value and gradients w.r.t. (c11, c22, Pi_ji).

    ``||c11 - Phi_j^+ Pi_ji Phi_i||_F^2 + ||c22 - Psi^+ Pi_ji Psi||_HS^2``, the
    HS norm weighted by the target's reduced mass. ``order`` picks which
    elastic basis is inverted in the second term (see :class:`CouplingOrder`).
    """
    P, T1, T2, Mk, left, right = _coupling_parts(C_ij, pi_ji, basis_i, basis_j, order)
    R1 = C_ij.c11 - T1
    R2 = C_ij.c22 - T2
    val = float(np.sum(R1 ** 2) + np.trace(R2.T @ Mk @ R2))
    g11 = 2 * R1
    g22 = 2 * Mk @ R2
    gP = -2 * basis_j.lb.pinv.T @ R1 @ basis_i.lb.functions.T
    gP += -2 * left.pinv.T @ (Mk @ R2) @ right.functions.T
    return val, g11, g22, gP


def coupling_loss(C_ij: FunctionalMap, pi_ji, basis_i, basis_j, order=CouplingOrder.AS_PRINTED) -> float:
    return coupling_term(C_ij, pi_ji, basis_i, basis_j, order)[0]


def _cosine_rows(a: np.ndarray, b: np.ndarray):
    """Mean over rows of ``1 - cos(a_u, b_u)`` (zero rows contribute 0) and its gradients."""
    c = a.shape[0]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    valid = (na > 0) & (nb > 0)
    na_s = np.where(valid, na, 1.0)
    nb_s = np.where(valid, nb, 1.0)
    cos = np.where(valid, np.sum(a * b, axis=1) / (na_s * nb_s), 1.0)
    # rounding can push cos of parallel rows just past 1; the loss itself stays >= 0
    val = float(np.sum(1.0 - np.clip(cos, -1.0, 1.0)) / c)
    ga = -(b / (na_s * nb_s)[:, None] - cos[:, None] * a / (na_s ** 2)[:, None]) / c
    gb = -(a / (na_s * nb_s)[:, None] - cos[:, None] * b / (nb_s ** 2)[:, None]) / c
    ga[~valid] = 0.0
    gb[~valid] = 0.0
    return val, ga, gb


def cycle_term(universe, embeddings, pairs, variant=CycleVariant.FROBENIUS):
    """Cycle loss and its gradients w.r.t. each universe assignment.

    ``universe[i]`` is the (n_i, c) assignment and ``embeddings[i]`` the
    (n_i, d) matrix ``Phi~_i A_i``.
    """
    variant = CycleVariant(variant)
    E = [P.T @ B for P, B in zip(universe, embeddings)]
    c = {e.shape for e in E}
    if len(c) > 1:
        raise ShapeMismatch(f"universe embeddings disagree in shape: {sorted(c)}")
    gE = [np.zeros_like(e) for e in E]
    total = 0.0
    per_pair = {}
    for i, j in pairs:
        if variant is CycleVariant.FROBENIUS:
            D = E[i] - E[j]
            v = float(np.sum(D ** 2))
            gE[i] += 2 * D
            gE[j] -= 2 * D
        else:
            v, ga, gb = _cosine_rows(E[i], E[j])
            gE[i] += ga
            gE[j] += gb
        per_pair[(i, j)] = v
        total += v
    grads = [B @ g.T for B, g in zip(embeddings, gE)]
    return total, grads, per_pair


def cycle_loss(assignments, embeddings, pairs=None, variant=CycleVariant.FROBENIUS) -> float:
    """Cycle loss from universe assignments (arrays or :class:`UniverseAssignment`, soft used).

    ``embeddings[i]`` is ``Phi~_i A_i`` or a :class:`ShapeData` carrying it;
    pairs default to all ordered pairs.
    """
    mats = [np.asarray(getattr(a, "soft", a), dtype=np.float64) for a in assignments]
    embeddings = [np.asarray(getattr(e, "embedded_features", e), dtype=np.float64) for e in embeddings]
    if pairs is None:
        pairs = all_pairs(len(mats))
    return cycle_term(mats, embeddings, pairs, variant)[0]


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(n) if i != j]


# ---------------------------------------------------------------------------
# collection-level state and report


@dataclass
class CollectionState:
    """Everything the objective depends on.

    ``pointmaps[(i, j)]`` is the soft map Pi_ij (n_i x n_j). ``universe[i]``
    is the soft assignment Pi_i (n_i x c); when ``logits`` is set the
    assignments are ``sinkhorn(logits[i])`` and are recomputed from them.
    With ``pointmaps_from_universe`` the pairwise maps are not stored but
    taken as ``Pi_i Pi_j^T``, so the coupling term also depends on the
    universe assignments.
    """

    shapes: list
    fmaps: dict
    pointmaps: dict
    universe: list
    pairs: list
    logits: list | None = None
    temperature: float = DEFAULT_TAU
    sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS
    coupling_order: CouplingOrder = CouplingOrder.AS_PRINTED
    pointmaps_from_universe: bool = False

    def __post_init__(self):
        if self.logits is not None and not self.universe:
            self.universe = [sinkhorn(L, self.sinkhorn_iters, self.temperature) for L in self.logits]

    @property
    def embeddings(self) -> list[np.ndarray]:
        return [s.embedded_features for s in self.shapes]

    def with_logits(self, logits: list) -> "CollectionState":
        return replace(self, logits=logits,
                       universe=[sinkhorn(L, self.sinkhorn_iters, self.temperature) for L in logits])

    def with_fmaps(self, fmaps: dict) -> "CollectionState":
        return replace(self, fmaps=fmaps)

    def pairwise_maps(self) -> dict:
        if not self.pointmaps_from_universe:
            return self.pointmaps
        keys = {key for i, j in self.pairs for key in ((i, j), (j, i))}
        return {(i, j): self.universe[i] @ self.universe[j].T for i, j in sorted(keys)}

    def check_complete(self) -> None:
        for i, j in self.pairs:
            for key in ((i, j), (j, i)):
                if key not in self.fmaps:
                    raise MissingPair(f"functional map {key} missing")
                if not self.pointmaps_from_universe and key not in self.pointmaps:
                    raise MissingPair(f"point map {key} missing")
        if len(self.universe) != len(self.shapes):
            raise MissingPair("a universe assignment is missing")


@dataclass
class LossReport:
    bij: float
    orth: float
    couple: float
    cycle: float
    spectral: float
    total: float
    weights: LossWeights
    per_pair: list = field(default_factory=list)

    def check(self, atol: float = 1e-9) -> None:
        w = self.weights
        spectral = w.bij * self.bij + w.orth * self.orth + w.couple * self.couple
        if abs(spectral - self.spectral) > atol * max(1.0, abs(spectral)):
            raise AssertionError("spectral total inconsistent")
        if abs(self.spectral + w.cycle * self.cycle - self.total) > atol * max(1.0, abs(self.total)):
            raise AssertionError("total inconsistent")

    def summary_row(self) -> dict:
        return {"bij": self.bij, "orth": self.orth, "couple": self.couple, "cycle": self.cycle,
                "spectral": self.spectral, "total": self.total}


@dataclass
class Gradients:
    fmaps: dict  # (i, j) -> (g11, g22)
    pointmaps: dict  # (i, j) -> gradient w.r.t. Pi_ij
    universe: list  # gradient w.r.t. each soft Pi_i


def _evaluate(state: CollectionState, weights: LossWeights, variant, want_grad: bool):
    state.check_complete()
    bases = [s.basis for s in state.shapes]
    g_f = {key: [np.zeros_like(C.c11), np.zeros_like(C.c22)] for key, C in state.fmaps.items()}
    pointmaps = state.pairwise_maps()
    g_p = {key: np.zeros_like(P) for key, P in pointmaps.items()}
    bij = orth = couple = 0.0
    rows = []
    for i, j in state.pairs:
        Cij, Cji = state.fmaps[(i, j)], state.fmaps[(j, i)]
        pb = po = 0.0
        for b in range(2):
            X, Y = Cij.blocks[b], Cji.blocks[b]
            if X.size == 0:
                continue
            v, gX, gY = bijectivity_term(X, Y)
            o1, gO1 = orthogonality_term(X)
            o2, gO2 = orthogonality_term(Y)
            pb += v
            po += o1 + o2
            if want_grad:
                g_f[(i, j)][b] += weights.bij * gX + weights.orth * gO1
                g_f[(j, i)][b] += weights.bij * gY + weights.orth * gO2
        pc, g11, g22, gP = coupling_term(Cij, pointmaps[(j, i)], bases[i], bases[j], state.coupling_order)
        if want_grad:
            g_f[(i, j)][0] += weights.couple * g11
            g_f[(i, j)][1] += weights.couple * g22
            g_p[(j, i)] += weights.couple * gP
        bij += pb
        orth += po
        couple += pc
        rows.append({"i": i, "j": j, "bij": pb, "orth": po, "couple": pc})
    cyc, g_u, per_pair = cycle_term(state.universe, state.embeddings, state.pairs, variant)
    for row in rows:
        row["cycle"] = per_pair[(row["i"], row["j"])]
    spectral = weights.bij * bij + weights.orth * orth + weights.couple * couple
    total = spectral + weights.cycle * cyc
    report = LossReport(bij, orth, couple, cyc, spectral, total, weights, rows)
    if not np.isfinite(total):
        raise NonFinite("loss is not finite")
    grads = None
    if want_grad:
        g_uni = [weights.cycle * g for g in g_u]
        if state.pointmaps_from_universe:
            U = state.universe
            for (a, b), G in g_p.items():
                g_uni[a] += G @ U[b]
                g_uni[b] += G.T @ U[a]
        grads = Gradients({k: tuple(v) for k, v in g_f.items()}, g_p, g_uni)
    return report, grads


def total_loss(state: CollectionState, weights: LossWeights = LossWeights(),
               variant=CycleVariant.FROBENIUS) -> LossReport:
    """Weighted sum of structural, coupling and cycle terms over ``state.pairs``."""
    return _evaluate(state, weights, variant, want_grad=False)[0]


def loss_gradients(state: CollectionState, weights: LossWeights = LossWeights(),
                   variant=CycleVariant.FROBENIUS) -> Gradients:
    """Analytic gradients of :func:`total_loss` w.r.t. every C block and soft map entry."""
    grads = _evaluate(state, weights, variant, want_grad=True)[1]
    arrays = [g for pair in grads.fmaps.values() for g in pair] + list(grads.pointmaps.values()) + grads.universe
    if not all(np.all(np.isfinite(g)) for g in arrays):
        raise NonFinite("non-finite gradient")
    return grads


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(x)
        flat[idx] = orig - step
        fm = f(x)
        flat[idx] = orig
        gf[idx] = (fp - fm) / (2 * step)
    return g


def finite_diff_check(f, grad, x, step: float = 1e-5) -> float:
    """Max over coordinates of ``|fd - g| / (|g| + 1e-12)`` with central differences.

    ``grad`` is the analytic gradient at ``x`` or a callable returning it.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad(x) if callable(grad) else grad, dtype=np.float64)
    fd = finite_diff_gradient(f, x, step)
    return float(np.max(np.abs(fd - g) / (np.abs(g) + 1e-12)))


# ---------------------------------------------------------------------------
# desk-scale optimisation

TRACE_HEADER = ("step", "bij", "orth", "couple", "cycle", "total")
MAX_DESK_VERTICES = 100
MAX_DESK_UNIVERSE = 128


@dataclass
class _Adam:
    rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> list:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mh = self.m[k] / (1 - self.beta1 ** self.t)
            vh = self.v[k] / (1 - self.beta2 ** self.t)
            out.append(p - self.rate * mh / (np.sqrt(vh) + self.eps))
        return out


def desk_optimize(state: CollectionState, weights: LossWeights = LossWeights(), variant=CycleVariant.FROBENIUS,
                  steps: int = 200, rate: float = 0.001, optimize_fmaps: bool = False,
                  sinkhorn_grad: str = "analytic"):
    """Adam on the universe logits (and optionally the C blocks) of a toy collection.

    Gradients reach the logits through Sinkhorn either analytically
    (``sinkhorn_grad="analytic"``, back-propagation through the unrolled
    iterations) or by central finite differences on every logit
    (``"finite_difference"``; slow, quadratic in n*c).

    Returns ``(state, trace)`` where ``trace`` holds one row per step
    (step 0 is the starting point) with the columns of ``TRACE_HEADER``.
    """
    if state.logits is None:
        raise ConfigError("desk_optimize needs a state parameterised by universe logits")
    if any(s.n > MAX_DESK_VERTICES for s in state.shapes) or state.logits[0].shape[1] > MAX_DESK_UNIVERSE:
        raise ConfigError(f"desk_optimize is limited to n <= {MAX_DESK_VERTICES} and c <= {MAX_DESK_UNIVERSE}")
    if rate < 0:
        raise ConfigError("rate must be >= 0")
    if sinkhorn_grad not in ("analytic", "finite_difference"):
        raise ConfigError(f"unknown sinkhorn_grad {sinkhorn_grad!r}")
    keys = sorted(state.fmaps) if optimize_fmaps else []
    adam = _Adam(rate)
    trace = []

    def record(step, report):
        trace.append({"step": step, "bij": report.bij, "orth": report.orth, "couple": report.couple,
                      "cycle": report.cycle, "total": report.total})

    for step in range(steps + 1):
        report, grads = _evaluate(state, weights, variant, want_grad=True)
        record(step, report)
        if step == steps:
            break
        g_logits = []
        for L, gP in zip(state.logits, grads.universe):
            if sinkhorn_grad == "analytic":
                g_logits.append(sinkhorn_vjp(L, gP, state.sinkhorn_iters, state.temperature))
            else:
                g_logits.append(sinkhorn_vjp_fd(L, gP, state.sinkhorn_iters, state.temperature))
        params = list(state.logits)
        gl = list(g_logits)
        for key in keys:
            params += [state.fmaps[key].c11, state.fmaps[key].c22]
            gl += list(grads.fmaps[key])
        new = adam.step(params, gl)
        if not all(np.all(np.isfinite(p)) for p in new):
            raise NonFinite(f"optimisation diverged at step {step}")
        n_log = len(state.logits)
        if rate == 0:
            # keep the state bit-identical
            continue
        state = state.with_logits(new[:n_log])
        if keys:
            fm = dict(state.fmaps)
            for idx, key in enumerate(keys):
                old = fm[key]
                fm[key] = FunctionalMap(new[n_log + 2 * idx], new[n_log + 2 * idx + 1], old.source, old.target)
            state = state.with_fmaps(fm)
    return state, trace
