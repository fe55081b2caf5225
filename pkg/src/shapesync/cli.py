"""Command-line entry point: ``shapesync <command> [options]``.

Exit codes: 0 success, 1 configuration or input error, 2 I/O error,
3 numerical failure. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MeshError, NumericalError, ShapeSyncError
from .evaluation import Normalization, cycle_deviation, geodesic_error, pck_auc, verify_theorem1
from .formats import read_fmat, read_index_map, write_csv, write_fmat, write_index_map, write_json
from .losses import TRACE_HEADER, CouplingOrder, desk_optimize, total_loss
from .mesh import load_mesh
from .pipeline import PipelineConfig, build_collection_state, match_collection, match_pair, prepare_collection

logger = logging.getLogger("shapesync")

MESH_SUFFIXES = (".off", ".obj", ".ply")
DEFAULT_CACHE = ".shapesync-cache"


def _mesh_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .off/.obj/.ply meshes in {d}")
    return files


def _load(path):
    return load_mesh(path, name=Path(path).stem)


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.cache:
        changes["cache_dir"] = args.cache
    if args.variant:
        changes["cycle_variant"] = args.variant
    if args.universe:
        changes["universe"] = args.universe
    if args.seed is not None:
        changes["seed"] = args.seed
    for name in ("steps", "rate"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    return cfg.replace(**changes) if changes else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_precompute(args, cfg: PipelineConfig) -> dict:
    cache_dir = cfg.cache_dir or DEFAULT_CACHE
    cfg = cfg.replace(cache_dir=cache_dir)
    meshes = [_load(p) for p in args.meshes]
    shapes = prepare_collection(meshes, cfg, args.jobs)
    return {"cache": cache_dir,
            "shapes": [{"name": s.name, "n_vertices": s.n, "k_lb": s.basis.k_lb, "k_elastic": s.basis.k_elastic,
                        "features": s.features.provenance.value, "d": s.features.d} for s in shapes]}


def cmd_match_pair(args, cfg: PipelineConfig) -> dict:
    a, b = _load(args.a), _load(args.b)
    res = match_pair(a, b, cfg)
    out = _out(args)
    stem = f"{a.name}__{b.name}"
    res.fmap.save(out / f"{stem}.fmap", lam_lb=cfg.lam_lb, lam_elastic=cfg.lam_elastic)
    write_index_map(out / f"{stem}.map.txt", res.indices)
    return {"fmap": str(out / f"{stem}.fmap"), "map": str(out / f"{stem}.map.txt"),
            "k_lb": res.fmap.k_lb, "k_elastic": res.fmap.k_elastic}


def cmd_match_collection(args, cfg: PipelineConfig) -> dict:
    meshes = [_load(p) for p in _mesh_files(args.dir)]
    res = match_collection(meshes, cfg, args.jobs)
    out = _out(args)
    names = [s.name for s in res.shapes]
    g = res.graph
    write_json(out / "graph.json", {"names": names, "k": g.k, "neighbors": [list(nb) for nb in g.neighbors],
                                    "edges": [list(e) for e in g.edges()]})
    write_fmat(out / "context.fmat", res.context.context)
    (out / "universe").mkdir(exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    for name, a in zip(names, res.assignments):
        write_index_map(out / "universe" / f"{name}.txt", a.hard_indices)
        write_fmat(out / "universe" / f"{name}.soft.fmat", a.soft)
    for (i, j), m in res.maps.items():
        write_index_map(out / "maps" / f"{names[i]}__{names[j]}.txt", m.indices)
    cycles = list(itertools.permutations(range(len(meshes)), 3))
    devs = cycle_deviation(res.maps, cycles, [s.mesh for s in res.shapes])
    write_csv(out / "cycle_deviation.csv", ("cycle", "mean_geo_x100"),
              [("-".join(names[i] for i in c), d) for c, d in zip(cycles, devs)])
    summary = {"shapes": names, "reference": names[res.reference], "universe_size": res.universe_size,
               "n_maps": len(res.maps), "max_cycle_deviation": max(devs) if devs else 0.0,
               "fallback_rows": {f"{names[i]}__{names[j]}": len(m.metadata.get("fallback_rows", []))
                                 for (i, j), m in res.maps.items()}}
    write_json(out / "summary.json", summary)
    return summary


def _state_for(args, cfg: PipelineConfig):
    meshes = [_load(p) for p in _mesh_files(args.dir)]
    shapes = prepare_collection(meshes, cfg, args.jobs)
    if args.init == "scores":
        res = match_collection(meshes, cfg, args.jobs, shapes=shapes)
        logits = [s * cfg.tau for s in res.scores]
        return build_collection_state(res.shapes, cfg, logits=logits)
    return build_collection_state(shapes, cfg)


def cmd_optimize(args, cfg: PipelineConfig) -> dict:
    state = _state_for(args, cfg)
    new, trace = desk_optimize(state, cfg.loss_weights, cfg.cycle_variant, cfg.steps, cfg.rate,
                               optimize_fmaps=args.fmaps)
    out = _out(args)
    write_csv(out / "trace.csv", TRACE_HEADER, [[row[k] for k in TRACE_HEADER] for row in trace])
    (out / "universe").mkdir(exist_ok=True)
    for s, L, U in zip(new.shapes, new.logits, new.universe):
        write_fmat(out / "universe" / f"{s.name}.logits.fmat", L)
        write_fmat(out / "universe" / f"{s.name}.soft.fmat", U)
    return {"initial_total": trace[0]["total"], "final_total": trace[-1]["total"], "steps": cfg.steps,
            "rate": cfg.rate, "trace": str(out / "trace.csv")}


def cmd_losses(args, cfg: PipelineConfig) -> dict:
    state = _state_for(args, cfg)
    rep = total_loss(state, cfg.loss_weights, cfg.cycle_variant)
    header = ["i", "j", "bij", "orth", "couple", "cycle"]
    rows = [[r[h] for h in header] for r in rep.per_pair]
    extra = {}
    if args.verbose:
        other = CouplingOrder.TRANSPOSED if state.coupling_order is CouplingOrder.AS_PRINTED \
            else CouplingOrder.AS_PRINTED
        try:
            alt = total_loss(dataclasses.replace(state, coupling_order=other), cfg.loss_weights,
                             cfg.cycle_variant)
            extra[f"couple_{other.value}"] = alt.couple
        except ShapeSyncError as exc:
            extra[f"couple_{other.value}"] = f"unavailable: {exc}"
    out = _out(args)
    write_csv(out / "losses.csv", header, rows)
    write_csv(out / "losses_total.csv", ["bij", "orth", "couple", "cycle", "spectral", "total"],
              [[rep.bij, rep.orth, rep.couple, rep.cycle, rep.spectral, rep.total]])
    return {**rep.summary_row(), **extra}


def cmd_evaluate(args, cfg: PipelineConfig) -> dict:
    mesh = _load(args.mesh)
    pred, gt = read_index_map(args.pred), read_index_map(args.gt)
    summary = geodesic_error(pred, gt, mesh, args.normalization)
    curve = pck_auc(summary, args.max_threshold, args.samples)
    out = _out(args)
    row = {**summary.to_row(), "auc": curve.auc}
    cols = ["mean_geo_x100", "n_vertices", "n_excluded", "normalization", "scale", "auc"]
    write_csv(out / "summary.csv", cols, [[row[c] for c in cols]])
    write_csv(out / "errors.csv", ("vertex", "error_x100"),
              [(int(v), float(e)) for v, e in zip(np.setdiff1d(np.arange(pred.size), summary.excluded),
                                                  summary.errors)])
    write_csv(out / "pck.csv", ("threshold", "proportion"), curve.rows())
    return row


def cmd_verify(args, cfg: PipelineConfig) -> dict:
    coeffs = [read_fmat(p) for p in args.coefficients]
    report = verify_theorem1(coeffs, args.tolerance, args.k_lb)
    if args.out:
        out = _out(args)
        write_json(out / "theorem1.json", report)
    return report


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("--cache", help="basis/descriptor cache directory")
    common.add_argument("--variant", choices=("frobenius", "cosine"), help="cycle loss variant")
    common.add_argument("--universe", help="universe size policy: max, ref:<name> or N")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="shapesync", description="Cycle-consistent multi-shape correspondence.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("precompute", parents=[common], help="cache bases and descriptors")
    s.add_argument("meshes", nargs="+")
    s.set_defaults(func=cmd_precompute)

    s = sub.add_parser("match-pair", parents=[common], help="functional map and vertex map between two meshes")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(func=cmd_match_pair)

    s = sub.add_parser("match-collection", parents=[common], help="universe matching of a mesh directory")
    s.add_argument("dir")
    s.set_defaults(func=cmd_match_collection)

    for name, func, helptext in (("optimize", cmd_optimize, "desk-scale loss optimisation"),
                                 ("losses", cmd_losses, "evaluate the loss terms")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("dir")
        s.add_argument("--init", choices=("random", "scores"), default="random",
                       help="universe logits: seeded random or matching scores")
        if name == "optimize":
            s.add_argument("--steps", type=int)
            s.add_argument("--rate", type=float)
            s.add_argument("--fmaps", action="store_true", help="also optimise the functional maps")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common], help="geodesic error and PCK of a predicted map")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("mesh")
    s.add_argument("--normalization", choices=[n.value for n in Normalization], default="sqrt_area")
    s.add_argument("--max-threshold", type=float, default=25.0, help="largest PCK threshold (x100 units)")
    s.add_argument("--samples", type=int, default=101)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify-theorem1", parents=[common],
                       help="check cycle consistency of exact universe maps on coefficient files")
    s.add_argument("coefficients", nargs="+", help="FMAT coefficient matrices")
    s.add_argument("--tolerance", type=float, default=1e-6)
    s.add_argument("--k-lb", type=int, default=None, help="rows in the LB block (default: all)")
    s.set_defaults(func=cmd_verify)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return 3
    if isinstance(exc, (OSError, MeshError)):
        return 2
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _config(args)
        result = args.func(args, cfg)
    except (ShapeSyncError, OSError, ValueError, KeyError) as exc:
        code = _exit_code(exc)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
        return code
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
