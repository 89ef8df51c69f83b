"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad graph, bad flags, missing
files), 2 runtime error, 3 threshold failure (gradcheck above tolerance,
bench accounting audit).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .evaluator import NodeCache, evaluate
from .geometry import GeometryError, write_obj
from .graph import (GraphError, ParameterAssignment, ShapeGraph,
                    bundled_graph_names, default_assignment, load_bundled,
                    load_graph)
from .harness import (PROFILES, VARIANTS, ExperimentReport, aggregate,
                      generate_scene, gradient_check, load_scene, run_scene,
                      save_scene, search_config_for)
from .objective import LossConfig
from .search import SearchConfig, run_search

GRADCHECK_TOL = 1e-3


def _py(o):
    """json.dump default for numpy scalars."""
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _meta(graph_name: str, seed: int | None, config: dict) -> dict:
    out = {"tool": "geonode", "version": __version__, "graph": graph_name,
           "config": config}
    if seed is not None:
        out["seed"] = seed
    return out


def _resolve_graph(spec: str) -> ShapeGraph:
    p = Path(spec)
    if p.exists():
        return load_graph(p)
    if spec in bundled_graph_names():
        return load_bundled(spec)
    raise FileNotFoundError(
        f"no such file, and {spec!r} is not a bundled graph "
        f"(bundled: {', '.join(bundled_graph_names())})")


def _parse_set(graph: ShapeGraph, pairs: list[str]) -> ParameterAssignment:
    a = default_assignment(graph)
    by_name = {p.name: p for p in graph.parameters}
    for raw in pairs:
        if "=" not in raw:
            raise GraphError([f"--set expects NAME=VALUE, got {raw!r}"])
        name, text = raw.split("=", 1)
        name = name.strip()
        if name not in by_name:
            raise GraphError([f"--set: unknown parameter {name!r}"])
        spec = by_name[name]
        text = text.strip()
        try:
            if spec.kind == "float":
                a.values[name] = float(text)
            elif spec.kind == "int":
                a.values[name] = int(text)
            else:
                if text.lower() in ("true", "1", "yes"):
                    a.values[name] = True
                elif text.lower() in ("false", "0", "no"):
                    a.values[name] = False
                else:
                    raise ValueError(text)
        except ValueError:
            raise GraphError(
                [f"--set: cannot read {text!r} as {spec.kind} for {name!r}"])
    return a


def _node_cache(args) -> NodeCache:
    """A fresh cache, or one persisted under GEONODE_CACHE_DIR."""
    cache_dir = os.environ.get("GEONODE_CACHE_DIR")
    if not cache_dir:
        return NodeCache()
    path = Path(cache_dir) / f"{args.graph_cache_key}.cache"
    if path.exists():
        try:
            return NodeCache.load(path)
        except Exception:
            return NodeCache()
    return NodeCache()


def _save_node_cache(cache: NodeCache, args) -> None:
    cache_dir = os.environ.get("GEONODE_CACHE_DIR")
    if not cache_dir:
        return
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    cache.save(Path(cache_dir) / f"{args.graph_cache_key}.cache")


# subcommands -----------------------------------------------------------------

def cmd_compile(args) -> int:
    graph = _resolve_graph(args.graph)
    print(f"graph {graph.name!r}: {len(graph.nodes)} nodes, "
          f"{len(graph.parameters)} parameters")
    order = " -> ".join(str(nid) for nid in graph.topo)
    print(f"topological order: {order}")
    print()
    print(f"{'parameter':<28} {'kind':<6} {'unit':<8} {'default':<10} range")
    for p in graph.parameters:
        rng = "-" if p.range is None else f"[{p.range[0]}, {p.range[1]}]"
        print(f"{p.name:<28} {p.kind:<6} {p.unit:<8} {p.default!s:<10} {rng}")
    return 0


def cmd_eval(args) -> int:
    graph = _resolve_graph(args.graph)
    assignment = _parse_set(graph, args.set or [])
    args.graph_cache_key = graph.name
    cache = _node_cache(args)
    result = evaluate(graph, assignment, cache, differentiable=False)
    _save_node_cache(cache, args)
    mesh = result.mesh
    lo, hi = mesh.bbox()
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    print(f"bbox: [{lo[0]:.6g}, {lo[1]:.6g}, {lo[2]:.6g}] .. "
          f"[{hi[0]:.6g}, {hi[1]:.6g}, {hi[2]:.6g}]")
    if args.time:
        print(f"forward time: {result.forward_seconds * 1e3:.3f} ms")
    if args.obj:
        meta = _meta(graph.name, None,
                     {"values": {k: v for k, v in assignment.values.items()}})
        write_obj(mesh, args.obj, comments=[json.dumps(meta, default=str)])
        print(f"wrote {args.obj}")
    return 0


def cmd_gradcheck(args) -> int:
    graph = _resolve_graph(args.graph)
    worst = gradient_check(graph, trials=args.trials, h=args.h,
                           seed=args.seed)
    print(f"max relative error over {args.trials} trials: {worst:.3e} "
          f"(tolerance {GRADCHECK_TOL:g})")
    return 0 if worst < GRADCHECK_TOL else 3


def cmd_synth(args) -> int:
    graph = _resolve_graph(args.graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"scenes": args.scenes, "views": args.views,
              "points": args.points, "image": args.image}
    for i in range(args.scenes):
        scene = generate_scene(graph, args.seed + i, args.views, args.points,
                               (args.image, args.image))
        save_scene(scene, out / f"scene_{i:04d}",
                   _meta(graph.name, args.seed + i, config))
    print(f"wrote {args.scenes} scenes under {out}")
    return 0


def _fit_config(args) -> SearchConfig:
    return SearchConfig(iterations=args.iters, simulations=args.sims,
                        refine_steps=args.refine_steps, seed=args.seed,
                        loss=LossConfig(chamfer_samples=args.chamfer_samples))


def cmd_fit(args) -> int:
    graph = _resolve_graph(args.graph)
    scene = load_scene(args.scene_dir)
    if scene.graph_name != graph.name:
        raise GraphError([f"scene was generated for graph "
                          f"{scene.graph_name!r}, not {graph.name!r}"])
    config = _fit_config(args)
    args.graph_cache_key = graph.name
    cache = _node_cache(args)
    result = run_search(graph, scene, config, cache=cache)
    _save_node_cache(cache, args)
    meta = _meta(graph.name, args.seed,
                 {"iters": args.iters, "sims": args.sims,
                  "refine_steps": args.refine_steps,
                  "chamfer_samples": args.chamfer_samples})
    if args.out:
        doc = {
            "meta": meta,
            "assignment": {
                "values": result.best.values,
                "rotation": result.best.rotation,
                "translation": [float(x) for x in result.best.translation],
            },
            "loss": {
                "total": result.best_loss.total,
                "depth_term": result.best_loss.depth_term,
                "normal_term": result.best_loss.normal_term,
                "chamfer_term": result.best_loss.chamfer_term,
                "lambda_chamfer": result.best_loss.lambda_chamfer,
            },
            "evaluations": result.evaluations,
            "refine_evaluations": result.refine_evaluations,
            "wall_seconds": result.wall_seconds,
        }
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2, default=_py)
        print(f"wrote {args.out}")
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write("# " + json.dumps(meta) + "\n")
            fh.write("iteration,best_loss,evaluations\n")
            for row in result.trace:
                fh.write(f"{row.iteration},{row.best_loss!r},"
                         f"{row.evaluations}\n")
        print(f"wrote {args.trace}")
    print(f"best loss {result.best_loss.total:.6g} after "
          f"{result.evaluations} evaluations "
          f"({result.wall_seconds:.1f} s)")
    return 0


def cmd_bench(args) -> int:
    from .report import render_figures, write_csv, write_json

    graph = _resolve_graph(args.graph)
    scene_dirs = sorted(d for d in Path(args.scenes).iterdir()
                        if (d / "scene.json").exists())
    if not scene_dirs:
        raise FileNotFoundError(f"no scene directories under {args.scenes}")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise GraphError([f"unknown variants {unknown}; "
                          f"choose from {list(VARIANTS)}"])
    profile = PROFILES[args.profile]
    scenes = [load_scene(d) for d in scene_dirs]
    t0 = time.perf_counter()
    tasks = [(graph, s, variants,
              search_config_for(profile, args.seed + i))
             for i, s in enumerate(scenes)]
    records = []
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            for rows in ex.map(_bench_worker, tasks):
                records.extend(rows)
    else:
        for task in tasks:
            records.extend(_bench_worker(task))
    report = ExperimentReport(
        graph_name=graph.name, profile=profile.name, seed=args.seed,
        variants=variants, records=records,
        aggregates=aggregate(records, variants),
        wall_seconds=time.perf_counter() - t0)
    if args.report:
        write_json(report, args.report, __version__)
        print(f"wrote {args.report}")
    if args.csv:
        write_csv(report, args.csv, __version__)
        print(f"wrote {args.csv}")
    if args.figures:
        for path in render_figures(report, args.figures, __version__):
            print(f"wrote {path}")
    failures = [(r.scene_seed, r.variant, f)
                for r in records for f in r.audit_failures]
    if failures:
        for seed, variant, f in failures:
            print(f"audit failure (scene {seed}, {variant}): {f}",
                  file=sys.stderr)
        return 3
    for variant in variants:
        agg = report.aggregates.get(variant)
        if agg:
            print(f"{variant}: best loss mean {agg['best_total_mean']:.4g}, "
                  f"evals-to-threshold median {agg['evals_to_tau_median']:.0f}"
                  f" ({agg['censored']} censored)")
    return 0


def _bench_worker(task):
    graph, scene, variants, cfg = task
    return run_scene(graph, scene, variants, cfg)


# dispatch --------------------------------------------------------------------

def build_parser() -> _Parser:
    ap = _Parser(prog="geonode",
                 description="Shape-program compiler, evaluator, and fitter")
    ap.add_argument("--version", action="version",
                    version=f"geonode {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="validate a graph and print its plan")
    c.add_argument("graph", help="graph file or bundled graph name")
    c.set_defaults(fn=cmd_compile)

    e = sub.add_parser("eval", help="evaluate a graph to a mesh")
    e.add_argument("graph")
    e.add_argument("--set", action="append", metavar="NAME=VALUE",
                   help="override a parameter (repeatable)")
    e.add_argument("--obj", help="write the mesh as OBJ")
    e.add_argument("--time", action="store_true",
                   help="print the forward evaluation time")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck",
                       help="compare tape gradients to finite differences")
    g.add_argument("graph")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("graph")
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=10)
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--image", type=int, default=96)
    s.set_defaults(fn=cmd_synth)

    f = sub.add_parser("fit", help="recover parameters for one scene")
    f.add_argument("graph")
    f.add_argument("scene_dir")
    f.add_argument("--iters", type=int, default=300)
    f.add_argument("--sims", type=int, default=30)
    f.add_argument("--refine-steps", type=int, default=100)
    f.add_argument("--chamfer-samples", type=int, default=2048)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", help="write the result as JSON")
    f.add_argument("--trace", help="write the per-iteration trace as CSV")
    f.set_defaults(fn=cmd_fit)

    b = sub.add_parser("bench", help="run recovery variants over scenes")
    b.add_argument("graph")
    b.add_argument("scenes", help="directory of scene directories")
    b.add_argument("--variants", default=",".join(VARIANTS))
    b.add_argument("--profile", choices=sorted(PROFILES), default="ci")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--report", help="write the aggregate report as JSON")
    b.add_argument("--csv", help="write per-run rows as CSV")
    b.add_argument("--figures", help="directory for rendered figures")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (GraphError, GeometryError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        if isinstance(exc, GraphError):
            for d in exc.diagnostics:
                print(f"error: {d}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # structured diagnostic, never a bare traceback
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
