"""End-to-end orchestration: configuration, basis/descriptor caching, pair and collection matching."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assign import compose_universe, universe_assignment
from .descriptors import FeatureMatrix, Provenance, compute_descriptors
from .errors import ConfigError, InsufficientSpectrum, ShapeMismatch
from .fmap import FunctionalMap, pointmap_from_fmap, solve_hybrid_map, spectral_embedding
from .formats import read_fmat, read_json, write_fmat, write_json
from .losses import CollectionState, CouplingOrder, CycleVariant, LossWeights, all_pairs
from .mesh import TriangleMesh, mass_matrix, off_text
from .shape_graph import ContextFeatures, ShapeGraph, build_shape_graph, gat_forward, init_attention_params
from .shapes import ShapeData
from .spectral import BasisKind, HybridBasis, SpectralBasis, _find_clusters, compute_hybrid_basis

logger = logging.getLogger(__name__)

ALL_PAIRS_LIMIT = 12


@dataclass(frozen=True)
class PipelineConfig:
    k_lb: int = 160
    k_elastic: int = 40
    lam_lb: float = 100.0
    lam_elastic: float = 50.0
    tau: float = 0.07
    sinkhorn_iters: int = 30
    graph_k: int = 3
    universe: str = "max"
    weights: dict = field(default_factory=lambda: {"bij": 1.0, "orth": 1.0, "couple": 1.0, "cycle": 1.0})
    cycle_variant: str = "frobenius"
    seed: int = 0
    cache_dir: str | None = None
    pair_policy: str = "auto"
    coupling_order: str = "as_printed"
    hs_norm: str = "reduced_mass"
    features: str = "wks"
    wks_dim: int = 128
    sigma_scale: float = 7.0
    bending_weight: float = 1.0
    hidden: int = 32
    context: bool = False
    feature_weight: float = 0.5
    steps: int = 200
    rate: float = 0.001

    def __post_init__(self):
        for name in ("k_lb", "k_elastic", "sinkhorn_iters", "graph_k", "wks_dim", "hidden"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        for name in ("lam_lb", "lam_elastic", "feature_weight", "bending_weight", "rate", "sigma_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        unknown = set(self.weights) - {"bij", "orth", "couple", "cycle"}
        if unknown:
            raise ConfigError(f"unknown loss weights: {sorted(unknown)}")
        # partial weight dicts fall back to 1.0 for the missing terms
        object.__setattr__(self, "weights", {"bij": 1.0, "orth": 1.0, "couple": 1.0, "cycle": 1.0, **self.weights})
        self.loss_weights  # validates values
        for name, enum in (("cycle_variant", CycleVariant), ("coupling_order", CouplingOrder)):
            try:
                enum(getattr(self, name))
            except ValueError:
                raise ConfigError(f"invalid {name}: {getattr(self, name)!r}") from None
        if self.pair_policy not in ("auto", "all", "graph"):
            raise ConfigError(f"invalid pair_policy: {self.pair_policy!r}")
        if self.hs_norm not in ("reduced_mass", "frobenius"):
            raise ConfigError(f"invalid hs_norm: {self.hs_norm!r}")
        if self.features not in ("wks", "xyz"):
            raise ConfigError(f"invalid features: {self.features!r}")
        parse_universe_policy(self.universe)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = read_json(path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def parse_universe_policy(policy) -> tuple[str, object]:
    """``"max"``, ``"ref:<name>"`` or a positive integer."""
    p = str(policy)
    if p == "max":
        return "max", None
    if p.startswith("ref:") and len(p) > 4:
        return "ref", p[4:]
    try:
        n = int(p)
    except ValueError:
        raise ConfigError(f"invalid universe policy {policy!r}") from None
    if n < 1:
        raise ConfigError("universe size must be >= 1")
    return "size", n


# ---------------------------------------------------------------------------
# shape preparation and caching


def effective_k(config: PipelineConfig, n_vertices: int) -> tuple[int, int]:
    """Basis sizes clamped below the vertex count."""
    return min(config.k_lb, n_vertices - 1), min(config.k_elastic, n_vertices - 1)


def _cache_key(mesh: TriangleMesh, k_lb: int, k_el: int, config: PipelineConfig) -> str:
    subset = {"k_lb": k_lb, "k_elastic": k_el, "bending_weight": config.bending_weight,
              "features": config.features, "wks_dim": config.wks_dim, "sigma_scale": config.sigma_scale}
    h = hashlib.sha256(off_text(mesh).encode())
    h.update(json.dumps(subset, sort_keys=True).encode())
    return h.hexdigest()


class ShapeCache:
    """Directory of cached bases and descriptors keyed by content hash.

    Each entry is a sub-directory with one FMAT file per array and a
    ``meta.json`` sidecar.
    """

    ARRAYS = ("lb_functions", "lb_eigenvalues", "el_functions", "el_eigenvalues", "features")

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)

    def path(self, key: str) -> str:
        return os.path.join(self.directory, key)

    def load(self, key: str, mesh: TriangleMesh) -> ShapeData | None:
        p = self.path(key)
        meta_path = os.path.join(p, "meta.json")
        if not os.path.exists(meta_path):
            return None
        try:
            meta = read_json(meta_path)
            data = {name: read_fmat(os.path.join(p, f"{name}.fmat")) for name in self.ARRAYS}
        except (OSError, ValueError, KeyError) as exc:
            logger.warning("ignoring unreadable cache entry %s: %s", p, exc)
            return None
        if data["lb_functions"].shape[0] != mesh.n_vertices:
            logger.warning("cache entry %s does not match mesh %s", p, mesh.name)
            return None
        M = mass_matrix(mesh)
        lb_vals, el_vals = data["lb_eigenvalues"].ravel(), data["el_eigenvalues"].ravel()
        lb = SpectralBasis(data["lb_functions"], lb_vals, M, BasisKind.LB, meta["lb_solver"], 0.0,
                           _find_clusters(lb_vals))
        el = SpectralBasis(data["el_functions"], el_vals, M, BasisKind.ELASTIC, meta["el_solver"],
                           float(meta["bending_weight"]), _find_clusters(el_vals))
        feats = FeatureMatrix(data["features"], Provenance(meta["provenance"]))
        return ShapeData(mesh, HybridBasis(lb, el), feats)

    def store(self, key: str, shape: ShapeData) -> None:
        p = self.path(key)
        os.makedirs(p, exist_ok=True)
        b = shape.basis
        arrays = {"lb_functions": b.lb.functions, "lb_eigenvalues": b.lb.eigenvalues,
                  "el_functions": b.elastic.functions, "el_eigenvalues": b.elastic.eigenvalues,
                  "features": shape.features.values}
        for name, arr in arrays.items():
            write_fmat(os.path.join(p, f"{name}.fmat"), arr)
        # the sidecar goes last so a complete entry is the only kind ever loaded
        write_json(os.path.join(p, "meta.json"),
                   {"mesh": shape.name, "k_lb": b.k_lb, "k_elastic": b.k_elastic, "lb_solver": b.lb.solver,
                    "el_solver": b.elastic.solver, "bending_weight": b.elastic.bending_weight,
                    "provenance": shape.features.provenance.value})


def _features_for(basis: HybridBasis, mesh: TriangleMesh, config: PipelineConfig) -> FeatureMatrix:
    if config.features == "xyz":
        return compute_descriptors(None, Provenance.XYZ, mesh=mesh)
    try:
        return compute_descriptors(basis.lb, Provenance.WKS, config.wks_dim, config.sigma_scale)
    except InsufficientSpectrum as exc:
        logger.warning("%s: %s; falling back to vertex coordinates", mesh.name, exc)
        return compute_descriptors(None, Provenance.XYZ, mesh=mesh)


def prepare_shape(mesh: TriangleMesh, config: PipelineConfig = PipelineConfig(),
                  k: tuple[int, int] | None = None, cache: ShapeCache | None = None) -> ShapeData:
    """Hybrid basis and descriptors for one mesh (``k`` overrides the clamped config sizes)."""
    k_lb, k_el = k if k is not None else effective_k(config, mesh.n_vertices)
    if cache is None and config.cache_dir:
        cache = ShapeCache(config.cache_dir)
    key = _cache_key(mesh, k_lb, k_el, config) if cache is not None else None
    if cache is not None:
        hit = cache.load(key, mesh)
        if hit is not None:
            return hit
    basis = compute_hybrid_basis(mesh, k_lb, k_el, config.bending_weight)
    shape = ShapeData(mesh, basis, _features_for(basis, mesh, config))
    if cache is not None:
        cache.store(key, shape)
        # hand back exactly what a warm run will see
        return cache.load(key, mesh) or shape
    return shape


def prepare_collection(meshes, config: PipelineConfig = PipelineConfig(), jobs: int = 1) -> list[ShapeData]:
    """Prepare every mesh with a common basis size (clamped by the smallest mesh)."""
    meshes = list(meshes)
    if not meshes:
        raise ValueError("no meshes given")
    k = effective_k(config, min(m.n_vertices for m in meshes))
    cache = ShapeCache(config.cache_dir) if config.cache_dir else None
    if jobs > 1 and len(meshes) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            shapes = list(pool.map(lambda m: prepare_shape(m, config, k, cache), meshes))
    else:
        shapes = [prepare_shape(m, config, k, cache) for m in meshes]
    prov = {s.features.provenance for s in shapes}
    if len(prov) > 1:
        shapes = [s if s.features.provenance is Provenance.XYZ else
                  ShapeData(s.mesh, s.basis, compute_descriptors(None, Provenance.XYZ, mesh=s.mesh))
                  for s in shapes]
    return shapes


# ---------------------------------------------------------------------------
# pairwise matching


@dataclass(frozen=True, eq=False)
class PairResult:
    fmap: FunctionalMap  # C_ab, coefficients of a -> coefficients of b
    indices: np.ndarray  # vertex of b for every vertex of a
    shapes: tuple


def _solve(shape_i: ShapeData, shape_j: ShapeData, config: PipelineConfig) -> FunctionalMap:
    return solve_hybrid_map(shape_i, shape_j, config.lam_lb, config.lam_elastic, config.hs_norm)


def match_pair(mesh_a: TriangleMesh, mesh_b: TriangleMesh, config: PipelineConfig = PipelineConfig(),
               shapes: tuple | None = None) -> PairResult:
    """Functional map ``C_ab`` and the hard vertex map a -> b recovered from ``C_ba``."""
    a, b = shapes if shapes is not None else prepare_collection([mesh_a, mesh_b], config)
    C_ab = _solve(a, b, config)
    C_ba = _solve(b, a, config)
    idx = pointmap_from_fmap(C_ba, b.basis, a.basis)
    return PairResult(C_ab, idx, (a, b))


# ---------------------------------------------------------------------------
# collection matching through a universe


@dataclass(frozen=True, eq=False)
class CollectionResult:
    shapes: list
    graph: ShapeGraph
    context: ContextFeatures
    reference: int
    universe_size: int
    scores: list
    assignments: list  # UniverseAssignment per shape
    fmaps: dict  # reference -> i functional maps
    maps: dict  # (i, j) -> hard PointMap, composed through the universe


def select_reference(shapes, policy) -> tuple[int, int]:
    """(reference index, universe size) for a universe policy."""
    kind, arg = parse_universe_policy(policy)
    counts = [s.n for s in shapes]
    if kind == "ref":
        names = [s.name for s in shapes]
        if arg not in names:
            raise ConfigError(f"reference shape {arg!r} not in collection")
        r = names.index(arg)
        return r, counts[r]
    r = int(np.argmax(counts))  # first shape on ties
    if kind == "max":
        return r, counts[r]
    return r, int(arg)


def _row_normalize(X: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n > 0, n, 1.0)


def universe_scores(shape: ShapeData, ref: ShapeData, C_ri: FunctionalMap, c: int,
                    feature_weight: float = 0.5) -> np.ndarray:
    """Affinity of every vertex of ``shape`` to every universe point (n_i x c).

    Universe points are the reference vertices. The spectral term compares
    ``Phi~_i C_ri`` with ``Phi~_ref`` (squared distance over its median); the
    feature term adds a cosine similarity. Universe points beyond the
    reference vertex count get a score well below every real one.
    """
    emb = spectral_embedding(C_ri, shape.basis)
    ref_emb = ref.basis.concatenated
    m = min(c, ref.n)
    D = (np.sum(emb ** 2, axis=1)[:, None] + np.sum(ref_emb[:m] ** 2, axis=1)[None, :]
         - 2 * emb @ ref_emb[:m].T)
    D = np.maximum(D, 0.0)
    med = float(np.median(D))
    S = -D / (med if med > 0 else 1.0)
    if feature_weight:
        S = S + feature_weight * _row_normalize(shape.features.values) @ _row_normalize(ref.features.values[:m]).T
    if c > m:
        pad = np.full((shape.n, c - m), S.min() - 10.0)
        S = np.hstack([S, pad])
    return S


def active_pairs(n_shapes: int, policy: str, graph: ShapeGraph | None = None) -> list[tuple[int, int]]:
    if policy == "all" or (policy == "auto" and n_shapes <= ALL_PAIRS_LIMIT):
        return all_pairs(n_shapes)
    if graph is None:
        raise ConfigError("graph pair policy needs a shape graph")
    return sorted({p for i, j in graph.edges() for p in ((i, j), (j, i))})


def match_collection(meshes, config: PipelineConfig = PipelineConfig(), jobs: int = 1,
                     shapes: list | None = None) -> CollectionResult:
    """Universe assignments for every shape and all pairwise maps ``Pi_i Pi_j^T``."""
    shapes = shapes if shapes is not None else prepare_collection(meshes, config, jobs)
    if len(shapes) < 2:
        raise ValueError("a collection needs at least two shapes")
    graph = build_shape_graph([s.features for s in shapes], config.graph_k)
    params = init_attention_params(graph.node_descriptors.shape[1], config.hidden, config.seed)
    context = gat_forward(graph, params)
    if config.context:
        shapes = [ShapeData(s.mesh, s.basis, FeatureMatrix(context.augment(i, s.features), s.features.provenance))
                  for i, s in enumerate(shapes)]
    r, c = select_reference(shapes, config.universe)
    ref = shapes[r]

    def fmap_for(i):
        if i == r:
            return FunctionalMap.identity(ref.basis.k_lb, ref.basis.k_elastic, ref.name, ref.name)
        return _solve(ref, shapes[i], config)

    def run(i):
        C = fmap_for(i)
        S = universe_scores(shapes[i], ref, C, c, config.feature_weight)
        return C, S, universe_assignment(S, config.sinkhorn_iters, config.tau, shapes[i].name)

    idx = range(len(shapes))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(run, idx))
    else:
        out = [run(i) for i in idx]
    fmaps = {(r, i): o[0] for i, o in enumerate(out)}
    scores = [o[1] for o in out]
    assignments = [o[2] for o in out]
    maps = {(i, j): compose_universe(assignments[i], assignments[j])
            for i in idx for j in idx if i != j}
    return CollectionResult(shapes, graph, context, r, c, scores, assignments, fmaps, maps)


# ---------------------------------------------------------------------------
# loss state


def build_collection_state(shapes, config: PipelineConfig = PipelineConfig(), universe_size: int | None = None,
                           logits: list | None = None, pairs: list | None = None,
                           pointmaps: str = "universe", seed: int | None = None) -> CollectionState:
    """Loss state for a prepared collection.

    Functional maps are solved for every active ordered pair. Universe
    logits default to seeded standard normals of shape (n_i, c).
    ``pointmaps="universe"`` ties the coupling term's pairwise maps to
    ``Pi_i Pi_j^T``; ``"features"`` uses fixed feature-softmax maps instead.
    """
    from .assign import soft_pointmap

    N = len(shapes)
    if N < 2:
        raise ValueError("a collection needs at least two shapes")
    if pairs is None:
        graph = build_shape_graph([s.features for s in shapes], config.graph_k) \
            if config.pair_policy != "all" and N > ALL_PAIRS_LIMIT else None
        pairs = active_pairs(N, config.pair_policy, graph)
    if logits is None:
        c = universe_size if universe_size is not None else select_reference(shapes, config.universe)[1]
        rng = np.random.default_rng(config.seed if seed is None else seed)
        logits = [rng.standard_normal((s.n, c)) for s in shapes]
    if len({L.shape[1] for L in logits}) != 1:
        raise ShapeMismatch("universe logits disagree in c")
    keys = sorted({key for i, j in pairs for key in ((i, j), (j, i))})
    fmaps = {(i, j): _solve(shapes[i], shapes[j], config) for i, j in keys}
    if pointmaps == "universe":
        pm, from_u = {}, True
    elif pointmaps == "features":
        pm = {(i, j): soft_pointmap(shapes[i].features, shapes[j].features, config.tau).weights for i, j in keys}
        from_u = False
    else:
        raise ConfigError(f"unknown pointmaps source {pointmaps!r}")
    return CollectionState(list(shapes), fmaps, pm, [], list(pairs), list(logits), config.tau,
                           config.sinkhorn_iters, CouplingOrder(config.coupling_order), from_u)


def pad_logits(logits: list, c: int) -> list:
    """Extend each (n_i, c0) logit matrix to c columns filled with the row minimum."""
    out = []
    for L in logits:
        extra = c - L.shape[1]
        if extra < 0:
            raise ConfigError("cannot shrink the universe by padding")
        out.append(np.hstack([L, np.repeat(L.min(axis=1, keepdims=True), extra, axis=1)]))
    return out


def universe_size_sweep(shapes, sizes, config: PipelineConfig = PipelineConfig(), steps: int | None = None,
                        rate: float | None = None, warm_start: bool = True, seed: int | None = None) -> list[dict]:
    """Optimise the collection loss for each universe size in ascending order.

    With ``warm_start`` each size starts from the previous size's optimised
    logits, the new universe points padded at the row minimum, so a larger
    universe starts where the smaller one stopped. Otherwise every size
    starts from its own seeded random logits.
    """
    from .losses import desk_optimize

    steps = config.steps if steps is None else steps
    rate = config.rate if rate is None else rate
    rows = []
    state = None
    for c in sorted(sizes):
        if warm_start and state is not None:
            state = build_collection_state(shapes, config, logits=pad_logits(state.logits, c))
        else:
            state = build_collection_state(shapes, config, universe_size=c, seed=seed)
        state, trace = desk_optimize(state, config.loss_weights, config.cycle_variant, steps, rate)
        rows.append({"c": c, "initial_cycle": trace[0]["cycle"], "cycle": trace[-1]["cycle"],
                     "initial_total": trace[0]["total"], "total": trace[-1]["total"]})
    return rows
