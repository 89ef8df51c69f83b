"""Closed-loop evaluation: synthetic scenes, recovery metrics, experiments.

A synthetic scene renders a ground-truth assignment of a shape program
from a ring of cameras and samples a surface point cloud.  Recovery runs
then fit the same program to those observations, which makes parameter
errors directly measurable.  Observation masks are all ones: the observed
depth is zero off the object, so the merged-map objective treats an
all-ones mask and an exact silhouette mask identically in this loop.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .evaluator import backward, evaluate
from .geometry import (Mesh, euler_xyz_matrix, interpolate_on_faces,
                       sample_surface, scatter_point_grads_to_vertices)
from .graph import ParameterAssignment, ShapeGraph
from .objective import (Camera, LossBreakdown, LossConfig, ObservedView,
                        chamfer_terms, look_at, loss, perspective_camera,
                        render_depth)
from .search import (SearchConfig, SearchResult, audit_search,
                     build_tree_spec, random_search, run_search)

DEFAULT_FOV_X = math.radians(50.0)

VARIANTS = ("full", "no_refine", "no_refine_no_exploit", "random")


@dataclass
class SyntheticScene:
    graph_name: str
    seed: int
    gt: ParameterAssignment
    views: list[ObservedView]
    points: np.ndarray            # (P, 3) float64
    translation_init: np.ndarray = field(default_factory=lambda: np.zeros(3))


def sample_assignment(graph: ShapeGraph, rng: np.random.Generator,
                      rotate: bool = True) -> ParameterAssignment:
    """Uniform draw over the parameter box and a uniform up-axis rotation."""
    values: dict[str, object] = {}
    for p in graph.parameters:
        if p.kind == "float":
            values[p.name] = float(rng.uniform(*p.range))
        elif p.kind == "int":
            values[p.name] = int(rng.integers(p.range[0], p.range[1] + 1))
        else:
            values[p.name] = bool(rng.random() < 0.5)
    rot = float(rng.uniform(0.0, 2.0 * math.pi)) if rotate else 0.0
    return ParameterAssignment(values, rot, np.zeros(3))


def ring_cameras(mesh: Mesh, n_views: int, width: int, height: int,
                 fov_x: float = DEFAULT_FOV_X) -> list[Camera]:
    """Cameras on a ring around the mesh, looking at its bounding-box center."""
    lo, hi = mesh.bbox()
    center = 0.5 * (lo + hi)
    radius = max(0.5 * float(np.linalg.norm(hi - lo)), 0.2)
    dist = max(1.3 * radius / math.tan(0.5 * fov_x), radius + 0.4)
    elev = 0.40
    fx, fy, cx, cy = perspective_camera(width, height, fov_x)
    cams = []
    for i in range(n_views):
        az = 0.35 + 2.0 * math.pi * i / n_views
        eye = center + dist * np.array([math.cos(elev) * math.cos(az),
                                        math.sin(elev),
                                        math.cos(elev) * math.sin(az)])
        cams.append(Camera(width, height, fx, fy, cx, cy, look_at(eye, center)))
    return cams


def generate_scene(graph: ShapeGraph, seed: int, n_views: int = 10,
                   n_points: int = 10000, image_size: tuple[int, int] = (96, 96),
                   fov_x: float = DEFAULT_FOV_X) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    gt = sample_assignment(graph, rng)
    mesh = evaluate(graph, gt, differentiable=False).mesh
    pts, _, _ = sample_surface(mesh, n_points, rng)
    w, h = image_size
    views = []
    for cam in ring_cameras(mesh, n_views, w, h, fov_x):
        depth = render_depth(mesh, cam)
        mask = np.ones((h, w), dtype=np.uint8)
        views.append(ObservedView(depth, mask, cam))
    return SyntheticScene(graph.name, seed, gt, views, pts)


def gt_floor(graph: ShapeGraph, scene: SyntheticScene,
             cfg: LossConfig) -> LossBreakdown:
    """Objective value at the ground truth (the scene's sampling floor)."""
    res = evaluate(graph, scene.gt, differentiable=False)
    return loss(res, scene.views, scene.points, cfg)


# scene directory format ------------------------------------------------------

def save_scene(scene: SyntheticScene, out_dir, meta: dict) -> None:
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(scene.views):
        stem = out / "views" / f"{i:04d}"
        v.depth.astype("<f4").tofile(f"{stem}.depth.f32")
        np.asarray(v.mask, dtype=np.uint8).tofile(f"{stem}.mask.u8")
        with open(f"{stem}.cam.json", "w") as fh:
            json.dump(v.camera.to_dict(), fh, indent=2)
    with open(out / "points.xyz", "w") as fh:
        for p in scene.points:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
    with open(out / "gt_params.json", "w") as fh:
        json.dump({"values": scene.gt.values,
                   "rotation": scene.gt.rotation,
                   "translation": [float(x) for x in scene.gt.translation]},
                  fh, indent=2)
    manifest = dict(meta)
    manifest.update({"graph": scene.graph_name, "seed": scene.seed,
                     "n_views": len(scene.views),
                     "n_points": int(len(scene.points)),
                     "translation_init": [float(x) for x in scene.translation_init]})
    with open(out / "scene.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_scene(scene_dir) -> SyntheticScene:
    d = Path(scene_dir)
    with open(d / "scene.json") as fh:
        manifest = json.load(fh)
    views = []
    vdir = d / "views"
    for i in range(int(manifest["n_views"])):
        stem = vdir / f"{i:04d}"
        with open(f"{stem}.cam.json") as fh:
            cam = Camera.from_dict(json.load(fh))
        depth = np.fromfile(f"{stem}.depth.f32", dtype="<f4") \
            .reshape(cam.height, cam.width).astype(float)
        mask = np.fromfile(f"{stem}.mask.u8", dtype=np.uint8) \
            .reshape(cam.height, cam.width)
        views.append(ObservedView(depth, mask, cam))
    points = np.loadtxt(d / "points.xyz", dtype=float).reshape(-1, 3)
    with open(d / "gt_params.json") as fh:
        g = json.load(fh)
    gt = ParameterAssignment(g["values"], float(g["rotation"]),
                             np.array(g["translation"], dtype=float))
    return SyntheticScene(manifest["graph"], int(manifest["seed"]), gt, views,
                          points,
                          np.array(manifest.get("translation_init", [0, 0, 0]),
                                   dtype=float))


# metrics ---------------------------------------------------------------------

def metric_chamfer_cm(a: Mesh, b: Mesh, n: int = 10000, seed: int = 7) -> float:
    """Symmetric mean linear nearest-neighbor distance between surfaces, cm.

    This is the reporting metric; the loss uses mean squared distances.
    """
    pa, _, _ = sample_surface(a, n, np.random.default_rng(seed))
    pb, _, _ = sample_surface(b, n, np.random.default_rng(seed + 1))
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(100.0 * 0.5 * (d_ab.mean() + d_ba.mean()))


def rotation_error_deg(a: float, b: float) -> float:
    """Absolute angular difference wrapped to [0, 180] degrees."""
    d = (a - b + math.pi) % (2.0 * math.pi) - math.pi
    return abs(math.degrees(d))


@dataclass
class SceneMetrics:
    continuous_err_cm: dict[str, float]
    rotation_err_deg: float
    translation_err_cm: float
    discrete_ok: dict[str, bool]
    chamfer_cm: float
    vertices: int
    faces: int


def evaluate_recovery(graph: ShapeGraph, scene: SyntheticScene,
                      recovered: ParameterAssignment) -> SceneMetrics:
    cont = {}
    disc = {}
    for p in graph.parameters:
        gt_v = scene.gt.values[p.name]
        rec_v = recovered.values[p.name]
        if p.kind == "float":
            cont[p.name] = abs(float(rec_v) - float(gt_v)) * 100.0
        else:
            disc[p.name] = bool(rec_v == gt_v)
    gt_mesh = evaluate(graph, scene.gt, differentiable=False).mesh
    rec_mesh = evaluate(graph, recovered, differentiable=False).mesh
    return SceneMetrics(
        continuous_err_cm=cont,
        rotation_err_deg=rotation_error_deg(recovered.rotation,
                                            scene.gt.rotation),
        translation_err_cm=float(100.0 * np.linalg.norm(
            recovered.translation - scene.gt.translation)),
        discrete_ok=disc,
        chamfer_cm=metric_chamfer_cm(gt_mesh, rec_mesh),
        vertices=rec_mesh.n_vertices,
        faces=rec_mesh.n_faces,
    )


def _interior_assignment(graph: ShapeGraph, rng: np.random.Generator,
                         margin: float) -> ParameterAssignment:
    """Like sample_assignment, but floats stay `margin` away from each range
    end so both sides of a finite-difference step remain admissible."""
    values: dict[str, object] = {}
    for p in graph.parameters:
        if p.kind == "float":
            lo, hi = p.range
            values[p.name] = float(rng.uniform(lo + margin, hi - margin))
        elif p.kind == "int":
            values[p.name] = int(rng.integers(p.range[0], p.range[1] + 1))
        else:
            values[p.name] = bool(rng.random() < 0.5)
    return ParameterAssignment(values, float(rng.uniform(0.0, 2.0 * math.pi)),
                               rng.uniform(-0.2, 0.2, 3))


def _nudged(a: ParameterAssignment, key: str, d: float) -> ParameterAssignment:
    out = a.copy()
    if key == "pose.rotation":
        out.rotation = a.rotation + d
    elif key in ("pose.tx", "pose.ty", "pose.tz"):
        i = ("pose.tx", "pose.ty", "pose.tz").index(key)
        t = np.array(a.translation, dtype=float)
        t[i] += d
        out.translation = t
    else:
        out.values[key] = float(a.values[key]) + d
    return out


def gradient_check(graph: ShapeGraph, trials: int = 20, h: float = 1e-4,
                   seed: int = 0, n_points: int = 256,
                   n_samples: int = 512) -> float:
    """Max relative error of tape gradients of the chamfer term against
    central finite differences, over random assignments.

    Two discrete choices are frozen at the unperturbed point on both sides
    of the comparison.  The surface sampling pattern (face index plus
    barycentric weights) is exactly what the reverse pass holds constant,
    and letting the area-weighted sampler re-pick faces under a
    perturbation would inject jumps unrelated to the gradients under test.
    The nearest-neighbour correspondence is frozen for the same reason:
    the chamfer distance is only piecewise smooth in it, a pairing that
    flips between the two perturbed evaluations puts a kink inside the
    differencing window, and the reverse pass differentiates the pairing
    that is active at the base point.
    """
    rng = np.random.default_rng(seed)
    names = [p.name for p in graph.continuous_params()]
    keys = names + ["pose.rotation", "pose.tx", "pose.ty", "pose.tz"]
    worst = 0.0
    for _ in range(trials):
        a = _interior_assignment(graph, rng, margin=4.0 * h)
        target = sample_assignment(graph, rng)
        tmesh = evaluate(graph, target, differentiable=False).mesh
        points, _, _ = sample_surface(tmesh, n_points, rng)
        sample_seed = int(rng.integers(2 ** 31))

        res = evaluate(graph, a, differentiable=True)
        _, fidx, bary = sample_surface(res.mesh, n_samples,
                                       np.random.default_rng(sample_seed))
        samples = interpolate_on_faces(res.mesh, fidx, bary)
        _, gs = chamfer_terms(points, samples)
        grads = backward(res, scatter_point_grads_to_vertices(res.mesh, fidx,
                                                              bary, gs))

        _, idx_ps = cKDTree(samples).query(points)
        _, idx_sp = cKDTree(points).query(samples)

        def value_at(mod: ParameterAssignment) -> float:
            m = evaluate(graph, mod, differentiable=False).mesh
            s = interpolate_on_faces(m, fidx, bary)
            term_ps = np.mean(np.sum((points - s[idx_ps]) ** 2, axis=1))
            term_sp = np.mean(np.sum((s - points[idx_sp]) ** 2, axis=1))
            return float(term_ps + term_sp)

        for key in keys:
            fd = (value_at(_nudged(a, key, +h))
                  - value_at(_nudged(a, key, -h))) / (2.0 * h)
            ad = grads[key]
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
            worst = max(worst, rel)
    return worst


# experiment driver -----------------------------------------------------------

@dataclass
class Profile:
    """Scene and search scale for one benchmark run."""
    name: str
    iterations: int
    simulations: int
    n_views: int
    image: int
    n_points: int
    chamfer_samples: int
    refine_steps: int
    n_scenes: int


PROFILES = {
    "ci": Profile("ci", iterations=100, simulations=8, n_views=4, image=48,
                  n_points=2048, chamfer_samples=1024, refine_steps=40,
                  n_scenes=20),
    "full": Profile("full", iterations=300, simulations=30, n_views=10,
                    image=96, n_points=10000, chamfer_samples=2048,
                    refine_steps=100, n_scenes=20),
}


def search_config_for(profile: Profile, seed: int) -> SearchConfig:
    return SearchConfig(
        iterations=profile.iterations,
        simulations=profile.simulations,
        refine_steps=profile.refine_steps,
        seed=seed,
        loss=LossConfig(chamfer_samples=profile.chamfer_samples),
    )


def variant_config(base: SearchConfig, variant: str) -> SearchConfig:
    cfg = SearchConfig(**{**base.__dict__})
    if variant == "no_refine":
        cfg.refine = False
    elif variant == "no_refine_no_exploit":
        cfg.refine = False
        cfg.exploit = False
    return cfg


@dataclass
class RunRecord:
    scene_seed: int
    variant: str
    metrics: SceneMetrics
    best_total: float
    tau: float
    evals_to_tau: int | None      # None = censored at budget
    evaluations: int
    refine_evaluations: int
    wall_seconds: float
    audit_failures: tuple[str, ...] = ()


def evals_to_threshold(result: SearchResult, tau: float) -> int | None:
    for row in result.trace:
        if row.best_loss <= tau:
            return row.evaluations
    return None


def run_scene(graph: ShapeGraph, scene: SyntheticScene, variants, base_config,
              tau_factor: float = 2.0) -> list[RunRecord]:
    """All requested variants on one scene, with budget-fair random search."""
    floor = gt_floor(graph, scene, base_config.loss)
    tau = tau_factor * floor.total
    tree = build_tree_spec(graph, scene, base_config)
    records = []
    full_evals = None
    for variant in variants:
        cfg = variant_config(base_config, variant)
        t0 = time.perf_counter()
        if variant == "random":
            budget = full_evals
            if budget is None:
                probe = run_search(graph, scene, variant_config(base_config,
                                                                "full"),
                                   tree=tree)
                budget = probe.evaluations
            result = random_search(graph, scene, budget, cfg)
        else:
            result = run_search(graph, scene, cfg, tree=tree)
            if variant == "full":
                full_evals = result.evaluations
        wall = time.perf_counter() - t0
        records.append(RunRecord(
            scene_seed=scene.seed,
            variant=variant,
            metrics=evaluate_recovery(graph, scene, result.best),
            best_total=result.best_loss.total,
            tau=tau,
            evals_to_tau=evals_to_threshold(result, tau),
            evaluations=result.evaluations,
            refine_evaluations=result.refine_evaluations,
            wall_seconds=wall,
            audit_failures=tuple(audit_search(result)),
        ))
    return records


@dataclass
class ExperimentReport:
    graph_name: str
    profile: str
    seed: int
    variants: list[str]
    records: list[RunRecord]
    aggregates: dict
    wall_seconds: float


def aggregate(records: list[RunRecord], variants) -> dict:
    out: dict[str, dict] = {}
    for variant in variants:
        rows = [r for r in records if r.variant == variant]
        if not rows:
            continue
        cont_names = rows[0].metrics.continuous_err_cm.keys()
        disc_names = rows[0].metrics.discrete_ok.keys()
        n = len(rows)
        censored = sum(1 for r in rows if r.evals_to_tau is None)
        budget_like = max(r.evaluations for r in rows)
        eff = [r.evals_to_tau if r.evals_to_tau is not None else budget_like
               for r in rows]
        out[variant] = {
            "scenes": n,
            "mae_cm": {c: float(np.mean([r.metrics.continuous_err_cm[c]
                                         for r in rows])) for c in cont_names},
            "rotation_mae_deg": float(np.mean([r.metrics.rotation_err_deg
                                               for r in rows])),
            "translation_mae_cm": float(np.mean([r.metrics.translation_err_cm
                                                 for r in rows])),
            "discrete_accuracy": {d: float(np.mean(
                [1.0 if r.metrics.discrete_ok[d] else 0.0 for r in rows]))
                for d in disc_names},
            "all_discrete_correct": float(np.mean(
                [1.0 if all(r.metrics.discrete_ok.values()) else 0.0
                 for r in rows])),
            "chamfer_cm_mean": float(np.mean([r.metrics.chamfer_cm
                                              for r in rows])),
            "best_total_mean": float(np.mean([r.best_total for r in rows])),
            "evals_to_tau_mean": float(np.mean(eff)),
            "evals_to_tau_median": float(np.median(eff)),
            "censored": censored,
            "evaluations_mean": float(np.mean([r.evaluations for r in rows])),
            "wall_seconds_mean": float(np.mean([r.wall_seconds for r in rows])),
        }
    return out


def _scene_worker(args):
    graph, scene, variants, base_cfg = args
    return run_scene(graph, scene, variants, base_cfg)


def run_experiment(graph: ShapeGraph, profile: Profile, variants=VARIANTS,
                   seed: int = 0, n_scenes: int | None = None,
                   jobs: int = 1) -> ExperimentReport:
    t0 = time.perf_counter()
    n = n_scenes or profile.n_scenes
    scenes = [generate_scene(graph, seed + i, profile.n_views,
                             profile.n_points, (profile.image, profile.image))
              for i in range(n)]
    tasks = [(graph, s, list(variants), search_config_for(profile, seed + i))
             for i, s in enumerate(scenes)]
    records: list[RunRecord] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for rows in ex.map(_scene_worker, tasks):
                records.extend(rows)
    else:
        for task in tasks:
            records.extend(_scene_worker(task))
    return ExperimentReport(
        graph_name=graph.name,
        profile=profile.name,
        seed=seed,
        variants=list(variants),
        records=records,
        aggregates=aggregate(records, variants),
        wall_seconds=time.perf_counter() - t0,
    )
