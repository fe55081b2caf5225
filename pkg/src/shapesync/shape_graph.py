"""Collection-level shape graph and graph-attention context aggregation (inference only)."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ShapeMismatch
from .formats import read_fmat, read_json, write_fmat, write_json

DEFAULT_LEAKY_SLOPE = 0.2
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class ShapeGraph:
    node_descriptors: np.ndarray  # (N, d), mean-pooled features
    neighbors: tuple  # neighbors[i] is a sorted tuple that contains i itself
    k: int
    topk: tuple = ()  # directed top-k lists before symmetrisation

    @property
    def n_nodes(self) -> int:
        return self.node_descriptors.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges (i < j), self-loops excluded."""
        return sorted({(min(i, j), max(i, j)) for i, nb in enumerate(self.neighbors) for j in nb if i != j})

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for i, nb in enumerate(self.neighbors):
            A[i, list(nb)] = True
        return A


def _cosine_matrix(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    U = X / np.where(norms > 0, norms, 1.0)
    return U @ U.T


def build_shape_graph(features, k: int = 3) -> ShapeGraph:
    """Top-k cosine similarity graph over mean-pooled shape features.

    Each shape links to its ``k`` most similar other shapes (ties go to the
    lower index); the edge set is then symmetrised by union and every node
    gets a self-loop.
    """
    mats = [np.asarray(getattr(F, "values", F), dtype=np.float64) for F in features]
    if len(mats) < 2:
        raise ValueError("a shape graph needs at least two shapes")
    d = mats[0].shape[1]
    if any(m.shape[1] != d for m in mats):
        raise DimensionMismatch("all shapes need the same feature dimension")
    if k < 1:
        raise ValueError("k must be >= 1")
    X = np.stack([m.mean(axis=0) for m in mats])
    N = X.shape[0]
    cos = _cosine_matrix(X)
    kk = min(k, N - 1)
    topk = []
    nbrs = [{i} for i in range(N)]
    for i in range(N):
        others = [j for j in range(N) if j != i]
        # stable sort on descending cosine keeps lower indices first on ties
        ranked = sorted(others, key=lambda j: -cos[i, j])[:kk]
        topk.append(tuple(ranked))
        for j in ranked:
            nbrs[i].add(j)
            nbrs[j].add(i)
    return ShapeGraph(X, tuple(tuple(sorted(s)) for s in nbrs), k, tuple(topk))


@dataclass(frozen=True, eq=False)
class AttentionParams:
    W1: np.ndarray  # (h, d)
    W2: np.ndarray  # (h, h)
    a1: np.ndarray  # (2h,)
    a2: np.ndarray  # (2h,)
    ln_gain: np.ndarray  # (h,)
    ln_bias: np.ndarray  # (h,)
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    seed: int = 0

    def __post_init__(self):
        h, d = self.W1.shape
        if self.W2.shape != (h, h) or self.a1.shape != (2 * h,) or self.a2.shape != (2 * h,) \
                or self.ln_gain.shape != (h,) or self.ln_bias.shape != (h,):
            raise ShapeMismatch("inconsistent attention parameter shapes")
        for arr in (self.W1, self.W2, self.a1, self.a2, self.ln_gain, self.ln_bias):
            if not np.all(np.isfinite(arr)):
                raise ValueError("attention parameters must be finite")

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def h(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "W2": self.W2, "a1": self.a1, "a2": self.a2,
                "ln_gain": self.ln_gain, "ln_bias": self.ln_bias}

    def save(self, directory) -> None:
        """One FMAT file per array plus ``params.json`` with d, h, slope and seed."""
        directory = os.fspath(directory)
        os.makedirs(directory, exist_ok=True)
        for name, arr in self.arrays().items():
            write_fmat(os.path.join(directory, f"{name}.fmat"), arr)
        write_json(os.path.join(directory, "params.json"),
                   {"d": self.d, "h": self.h, "leaky_slope": self.leaky_slope, "seed": self.seed})

    @classmethod
    def load(cls, directory) -> "AttentionParams":
        directory = os.fspath(directory)
        meta = read_json(os.path.join(directory, "params.json"))
        arr = {name: read_fmat(os.path.join(directory, f"{name}.fmat"))
               for name in ("W1", "W2", "a1", "a2", "ln_gain", "ln_bias")}
        for name in ("a1", "a2", "ln_gain", "ln_bias"):
            arr[name] = arr[name].ravel()
        return cls(**arr, leaky_slope=float(meta["leaky_slope"]), seed=int(meta["seed"]))


def init_attention_params(d: int, h: int, seed: int = 0, leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> AttentionParams:
    """Seeded uniform initialisation in ``[-s, s]`` with ``s = sqrt(6 / (d + h))``."""
    if d < 1 or h < 1:
        raise ValueError("d and h must be >= 1")
    rng = np.random.default_rng(seed)
    s = np.sqrt(6.0 / (d + h))
    return AttentionParams(
        W1=rng.uniform(-s, s, size=(h, d)),
        W2=rng.uniform(-s, s, size=(h, h)),
        a1=rng.uniform(-s, s, size=2 * h),
        a2=rng.uniform(-s, s, size=2 * h),
        ln_gain=np.ones(h),
        ln_bias=np.zeros(h),
        leaky_slope=leaky_slope,
        seed=seed,
    )


def _leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def attention_layer(X: np.ndarray, neighbors, W: np.ndarray, a: np.ndarray, slope: float):
    """One attention layer. Returns the new node states and the per-node weight vectors."""
    Z = X @ W.T  # (N, h)
    out = np.empty_like(Z)
    alphas = []
    for i, nb in enumerate(neighbors):
        nb = list(nb)
        pair = np.hstack([np.repeat(Z[i:i + 1], len(nb), axis=0), Z[nb]])  # (|N_i|, 2h)
        e = _leaky_relu(pair, slope) @ a
        e = e - e.max()
        alpha = np.exp(e)
        alpha /= alpha.sum()
        alphas.append(alpha)
        out[i] = _elu(alpha @ Z[nb])
    return out, alphas


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


@dataclass(frozen=True, eq=False)
class ContextFeatures:
    context: np.ndarray  # (N, h) per-shape context vectors
    attention: tuple  # (layer1 alphas, layer2 alphas)

    @property
    def h(self) -> int:
        return self.context.shape[1]

    def augment(self, index: int, F) -> np.ndarray:
        """Per-vertex rows ``[context_i || F_i(v)]`` of width h + d."""
        F = np.asarray(getattr(F, "values", F), dtype=np.float64)
        return np.hstack([np.repeat(self.context[index][None, :], F.shape[0], axis=0), F])


def gat_forward(graph: ShapeGraph, params: AttentionParams, seed: int | None = None,
                dropout: float = 0.0) -> ContextFeatures:
    """Two attention layers over the shape graph followed by layer normalisation.

    Deterministic unless ``dropout > 0``, in which case ``seed`` drives the
    dropout mask on the final output.
    """
    X = graph.node_descriptors
    if X.shape[1] != params.d:
        raise ShapeMismatch(f"descriptors have d={X.shape[1]}, parameters expect {params.d}")
    H1, alpha1 = attention_layer(X, graph.neighbors, params.W1, params.a1, params.leaky_slope)
    H2, alpha2 = attention_layer(H1, graph.neighbors, params.W2, params.a2, params.leaky_slope)
    out = layer_norm(H2, params.ln_gain, params.ln_bias)
    if dropout > 0:
        rng = np.random.default_rng(seed)
        keep = rng.random(out.shape) >= dropout
        out = out * keep / (1.0 - dropout)
    return ContextFeatures(out, (tuple(alpha1), tuple(alpha2)))
