"""Cycle-consistent shape correspondence with hybrid spectral bases and a shared universe."""

__version__ = "0.1.0"

from .assign import (MapMode, PointMap, UniverseAssignment, compose_universe, harden, select_universe_size,
                     sinkhorn, sinkhorn_vjp, soft_pointmap, universe_assignment)
from .descriptors import FeatureMatrix, Provenance, compute_descriptors, wave_kernel_signature
from .errors import *  # noqa: F401,F403
from .evaluation import ErrorSummary, Normalization, PckCurve, cycle_deviation, geodesic_error, pck_auc, \
    verify_theorem1
from .fmap import (FunctionalMap, fmap_from_pointmap, pointmap_from_fmap, solve_elastic_map, solve_hybrid_map,
                   solve_lb_map, universe_fmap)
from .losses import (CollectionState, CouplingOrder, CycleVariant, LossReport, LossWeights, coupling_loss,
                     cycle_loss, desk_optimize, finite_diff_check, loss_gradients, structural_loss, total_loss)
from .mesh import TriangleMesh, cotangent_laplacian, geodesic_distances, load_mesh, mass_matrix, save_off
from .pipeline import (PipelineConfig, build_collection_state, match_collection, match_pair, prepare_collection,
                       prepare_shape)
from .shape_graph import AttentionParams, ShapeGraph, build_shape_graph, gat_forward, init_attention_params
from .shapes import ShapeData
from .spectral import HybridBasis, SpectralBasis, compute_hybrid_basis, generalized_eigenpairs, project_features
