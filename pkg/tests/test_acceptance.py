"""Release acceptance gate.

One test per shipping criterion, each ending in a single PASS/FAIL line
(reprinted in the terminal summary).  The search benchmarks are the slow
part: criteria 4, 5 and 7 share two module-scoped fixtures so the full
ablation bench and the efficiency bench each run exactly once.
"""

import shutil
import time

import numpy as np
import pytest

from geonode.evaluator import NodeCache, evaluate, warm_cache
from geonode.geometry import obj_lines, sample_surface
from geonode.graph import ParameterAssignment, default_assignment
from geonode.harness import (PROFILES, evals_to_threshold, generate_scene,
                             gradient_check, run_experiment, sample_assignment,
                             search_config_for)
from geonode.objective import chamfer_loss
from geonode.search import (audit_search, build_tree_spec, random_search,
                            run_search)

GOLDEN = "tests/golden/cabinet_divboards_default.obj"
CI = PROFILES["ci"]

RESULTS: list[str] = []


def _criterion(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- heavyweight shared benches ----------------------------------------------

@pytest.fixture(scope="module")
def cabinet_bench(cabinet):
    """20 synthetic cabinet scenes, ablation variants, fixed seed."""
    return run_experiment(
        cabinet, CI,
        variants=("full", "no_refine", "no_refine_no_exploit"), seed=7)


@pytest.fixture(scope="module")
def sofa_runs(sofa):
    """One synthetic sofa scene, 10 search seeds, tree search vs random."""
    scene = generate_scene(sofa, seed=7, n_views=CI.n_views,
                           n_points=CI.n_points,
                           image_size=(CI.image, CI.image))
    runs = []
    for s in range(10):
        cfg = search_config_for(CI, seed=s)
        tree = build_tree_spec(sofa, scene, cfg)
        full = run_search(sofa, scene, cfg, tree=tree)
        rand = random_search(sofa, scene, full.evaluations, cfg)
        runs.append((s, full, rand))
    return {"scene": scene, "runs": runs}


# -- criteria ----------------------------------------------------------------

def test_criterion_1_gradient_exactness(cabinet, sofa, divboards):
    t0 = time.perf_counter()
    worst = {g.name: gradient_check(g, trials=20, h=1e-4)
             for g in (cabinet, sofa, divboards)}
    wall = time.perf_counter() - t0
    peak = max(worst.values())
    _criterion(1, peak < 1e-3 and wall < 120.0,
               f"chamfer-gradient max rel err {peak:.3g} over 20 random "
               f"assignments per graph (limit 1e-3), wall {wall:.1f}s "
               f"(limit 120s)")


def test_criterion_2_reference_shape_golden(divboards):
    a = ParameterAssignment({
        "Width": 0.5,
        "Height": 0.6,
        "Board Thickness": 0.04,
        "Dividing Board Thickness": 0.04,
        "Number of Dividing Boards": 5,
    })
    mesh = evaluate(divboards, a, differentiable=False).mesh
    ext = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    n_boards = len(mesh.vertices) // 8 if len(mesh.vertices) % 8 == 0 else -1
    with open(GOLDEN) as fh:
        golden = fh.read().splitlines()
    bitwise = obj_lines(mesh) == golden
    ok = (n_boards == 5 and abs(ext[0] - 0.5) < 1e-6
          and abs(ext[1] - 0.6) < 1e-6 and bitwise)
    _criterion(2, ok,
               f"{n_boards} instanced boards, bbox {ext[0]:.6f} x {ext[1]:.6f} m "
               f"(want 0.5 x 0.6 within 1e-6), golden OBJ bitwise "
               f"match={bitwise}")


def _timed_eval_ms(graph, a, cache):
    t0 = time.perf_counter()
    evaluate(graph, a, cache=cache, differentiable=False)
    return (time.perf_counter() - t0) * 1e3


def test_criterion_3_forward_speed_and_cache(cabinet, sofa, divboards):
    parts = []
    ok = True
    for graph in (cabinet, sofa, divboards):
        a = default_assignment(graph)
        discretes = {p.name: a.values[p.name] for p in graph.parameters
                     if p.kind != "float"}
        shared = NodeCache()
        warm_cache(graph, shared, discretes)
        # interleave the three timings so background load drifts hit all
        # of them equally; compare medians over 100 runs each
        fwd_t, cold_t, warm_t = [], [], []
        for _ in range(100):
            fwd_t.append(_timed_eval_ms(graph, a, None))
            cold_t.append(_timed_eval_ms(graph, a, NodeCache()))
            warm_t.append(_timed_eval_ms(graph, a, shared))
        fwd = float(np.median(fwd_t))
        soft = "<20ms" if fwd < 20.0 else "MISSES soft 20ms"
        if len(shared):
            ratio = float(np.median(cold_t)) / float(np.median(warm_t))
            ok = ok and ratio >= 1.5
            parts.append(f"{graph.name} {fwd:.2f}ms ({soft}), warm-cache "
                         f"{ratio:.2f}x over cold (need >=1.5x)")
        else:
            parts.append(f"{graph.name} {fwd:.2f}ms ({soft}), no "
                         f"cache-eligible nodes so the warm/cold property "
                         f"is vacuous")
    _criterion(3, ok, "; ".join(parts))


def test_criterion_4_ablation_trends(cabinet_bench):
    agg = cabinet_bench.aggregates
    full = agg["full"]
    nr = agg["no_refine"]
    nrne = agg["no_refine_no_exploit"]
    w_full, w_nr = full["mae_cm"]["Width"], nr["mae_cm"]["Width"]
    r_full, r_nr = full["rotation_mae_deg"], nr["rotation_mae_deg"]
    hb_nr = nr["discrete_accuracy"]["Has Back"]
    hb_nrne = nrne["discrete_accuracy"]["Has Back"]
    disc_full = full["all_discrete_correct"]
    wall = cabinet_bench.wall_seconds
    ok = (w_full < w_nr and r_full < r_nr and hb_nr >= hb_nrne
          and wall <= 1800.0)
    _criterion(4, ok,
               f"20 scenes in {wall:.0f}s (limit 1800s); MAE Width "
               f"{w_full:.2f} vs {w_nr:.2f} cm no-refine, rotation "
               f"{r_full:.2f} vs {r_nr:.2f} deg no-refine; Has Back accuracy "
               f"{hb_nr:.2f} no-refine vs {hb_nrne:.2f} no-exploit; all "
               f"discretes exactly recovered on {disc_full:.0%} of scenes "
               f"(reported, scale-dependent)")


def test_criterion_5_search_efficiency(sofa_runs):
    e_full, e_rand = [], []
    wins = 0
    for _, full, rand in sofa_runs["runs"]:
        # per-seed quality bar: the better end-of-budget loss of the two
        # methods.  Count evaluations each needs to get under it; a method
        # that never does is censored at its full budget.
        tau = min(full.best_loss.total, rand.best_loss.total)
        ef = evals_to_threshold(full, tau)
        er = evals_to_threshold(rand, tau)
        e_full.append(ef if ef is not None else full.evaluations)
        e_rand.append(er if er is not None else rand.evaluations)
        wins += full.best_loss.total < rand.best_loss.total
    med_f = float(np.median(e_full))
    med_r = float(np.median(e_rand))
    _criterion(5, med_f < med_r,
               f"median evaluations to the best quality either method reaches "
               f"under equal budgets, 10 seeds: tree search {med_f:.0f} vs "
               f"random {med_r:.0f}; tree search ends better on {wins}/10 "
               f"seeds")


def test_criterion_6_mesh_lightness(cabinet, sofa, divboards):
    worst, worst_name = 0, ""
    for gi, graph in enumerate((cabinet, sofa, divboards)):
        rng = np.random.default_rng(100 + gi)
        for _ in range(100):
            a = sample_assignment(graph, rng)
            n = len(evaluate(graph, a, differentiable=False).mesh.vertices)
            if n > worst:
                worst, worst_name = n, graph.name
    _criterion(6, worst <= 200,
               f"max {worst} vertices ({worst_name}) across 100 random "
               f"assignments per graph (limit 200)")


def test_criterion_7_accounting_and_determinism(cabinet_bench, sofa_runs,
                                                sofa):
    failures = [f for r in cabinet_bench.records for f in r.audit_failures]
    for _, full, rand in sofa_runs["runs"]:
        failures += audit_search(full) + audit_search(rand)
        best = [row.best_loss for row in full.trace]
        if any(b > a for a, b in zip(best, best[1:])):
            failures.append("best-so-far trace increased")
    cfg = search_config_for(CI, seed=0)
    again = run_search(sofa, sofa_runs["scene"], cfg,
                       tree=build_tree_spec(sofa, sofa_runs["scene"], cfg))
    first = sofa_runs["runs"][0][1]
    rows = lambda res: [(r.iteration, r.best_loss, r.evaluations)
                        for r in res.trace]
    identical = rows(again) == rows(first)
    _criterion(7, not failures and identical,
               f"{len(failures)} accounting violations across "
               f"{len(cabinet_bench.records) + 2 * len(sofa_runs['runs'])} "
               f"bench runs; repeated seed-0 sofa run trace bitwise "
               f"identical={identical}")


def test_criterion_8_chamfer_oracle_equivalence(cabinet, sofa, divboards):
    graphs = (cabinet, sofa, divboards)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        mesh = evaluate(graphs[i % 3], sample_assignment(graphs[i % 3], rng),
                        differentiable=False).mesh
        src = evaluate(graphs[(i + 1) % 3],
                       sample_assignment(graphs[(i + 1) % 3], rng),
                       differentiable=False).mesh
        points, _, _ = sample_surface(src, 512, rng)
        value, _ = chamfer_loss(points, mesh, 512, seed=i)
        samples, _, _ = sample_surface(mesh, 512, np.random.default_rng(i))
        d2 = ((points[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
        oracle = d2.min(axis=1).mean() + d2.min(axis=0).mean()
        worst = max(worst, abs(value - oracle))
    _criterion(8, worst < 1e-9,
               f"engine vs exhaustive all-pairs chamfer max abs diff "
               f"{worst:.3g} over 50 mesh/point-set pairs at 512 samples "
               f"(limit 1e-9)")


def test_criterion_9_exporter_round_trip():
    if shutil.which("blender") is None:
        line = ("criterion 9: SKIP - exporter round-trip needs a Blender "
                "install (manual / CI-optional)")
        RESULTS.append(line)
        print(line)
        pytest.skip("blender binary not on PATH")
    pytest.skip("no .blend scenes bundled with this checkout; run the "
                "exporter package's round-trip script against local scenes")
