"""Tree construction, selection rule, rollouts, refinement, audits."""
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from geonode.evaluator import evaluate
from geonode.geometry import sample_surface
from geonode.graph import default_assignment, parse_graph
from geonode.objective import (Camera, LossConfig, ObservedView, look_at,
                               perspective_camera, render_depth)
from geonode.search import (ROTATION_LEVEL, TRANSLATION_LEVEL, ScoreTable,
                            SearchConfig, audit_search, build_tree_spec,
                            candidate_values, random_search, refine,
                            run_search, ucb)

SMALL_LOSS = LossConfig(chamfer_samples=512)


def small_config(**kw):
    base = dict(iterations=10, simulations=3, refine=False, seed=0,
                loss=SMALL_LOSS, influence_probes=4, probe_samples=256)
    base.update(kw)
    return SearchConfig(**base)


def observe(mesh, eye, target=(0.0, 0.3, 0.0), wh=48):
    fx, fy, cx, cy = perspective_camera(wh, wh, math.pi / 3)
    cam = Camera(wh, wh, fx, fy, cx, cy, look_at(eye, target))
    depth = render_depth(mesh, cam)
    return ObservedView(depth=depth, mask=depth > 0, camera=cam)


@pytest.fixture(scope="module")
def board_scene(divboards):
    gt = evaluate(divboards, default_assignment(divboards),
                  differentiable=False)
    views = [observe(gt.mesh, e) for e in ((0.0, 0.5, -1.6), (1.1, 0.8, -0.9))]
    points, _, _ = sample_surface(gt.mesh, 800, np.random.default_rng(3))
    return SimpleNamespace(views=views, points=points,
                           translation_init=np.zeros(3))


# tree construction -----------------------------------------------------------

def test_outer_dimensions_outrank_leg_dimensions(cabinet):
    # probe budget at the production defaults; coarser probes are noisier
    scene = SimpleNamespace(translation_init=np.zeros(3))
    tree = build_tree_spec(cabinet, scene, SearchConfig())
    names = tree.names()
    pos = {n: i for i, n in enumerate(names)}
    for big in ("Width", "Height", "Depth"):
        for small in ("Leg Width", "Leg Height", "Leg Depth"):
            assert pos[big] < pos[small], (big, small)


def test_tree_levels_for_single_float_parameter():
    g = parse_graph(json.dumps({
        "name": "t", "version": "1",
        "parameters": [{"name": "S", "kind": "float", "range": [0.2, 1.2],
                        "default": 0.5}],
        "nodes": [
            {"id": 0, "kind": "input", "inputs": []},
            {"id": 1, "kind": "combine",
             "inputs": [[0, 0], [0, 0], [0, 0]]},
            {"id": 2, "kind": "primitive", "attrs": {"shape": "cuboid"},
             "inputs": [[1, 0]]},
            {"id": 3, "kind": "output", "inputs": [[2, 0]]}]}))
    scene = SimpleNamespace(translation_init=np.array([0.1, 0.0, 0.2]))
    tree = build_tree_spec(g, scene, small_config(float_bins=5))
    assert [lv.role for lv in tree.levels] == ["rotation", "shape",
                                               "translation"]
    rot, shape, trans = tree.levels
    assert rot.name == ROTATION_LEVEL
    assert rot.candidates == (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)
    assert shape.name == "S"
    np.testing.assert_allclose(shape.candidates, [0.3, 0.5, 0.7, 0.9, 1.1],
                               atol=1e-12)
    assert trans.name == TRANSLATION_LEVEL
    assert trans.candidates == ((0.1, 0.0, 0.2),)


def test_bool_parameters_get_binary_levels():
    g = parse_graph(json.dumps({
        "name": "t", "version": "1",
        "parameters": [{"name": "A", "kind": "bool", "default": True},
                       {"name": "B", "kind": "bool", "default": False}],
        "nodes": [
            {"id": 0, "kind": "input", "inputs": []},
            {"id": 1, "kind": "primitive", "attrs": {"shape": "cuboid"},
             "inputs": [{"const": [1.0, 1.0, 1.0]}]},
            {"id": 2, "kind": "primitive", "attrs": {"shape": "cuboid"},
             "inputs": [{"const": [0.5, 0.5, 0.5]}]},
            {"id": 3, "kind": "switch", "inputs": [[0, 0], [1, 0], [2, 0]]},
            {"id": 4, "kind": "primitive", "attrs": {"shape": "cuboid"},
             "inputs": [{"const": [0.2, 2.0, 0.2]}]},
            {"id": 5, "kind": "switch", "inputs": [[0, 1], [3, 0], [4, 0]]},
            {"id": 6, "kind": "output", "inputs": [[5, 0]]}]}))
    tree = build_tree_spec(g, SimpleNamespace(translation_init=np.zeros(3)),
                           small_config())
    by_name = {lv.name: lv for lv in tree.levels}
    assert by_name["A"].candidates == (False, True)
    assert by_name["B"].candidates == (False, True)


def test_candidate_grids():
    cfg = small_config(float_bins=4)
    Spec = SimpleNamespace
    assert candidate_values(Spec(kind="bool", range=None), cfg) == (False, True)
    assert candidate_values(Spec(kind="int", range=(2, 6)), cfg) == (2, 3, 4, 5, 6)
    got = candidate_values(Spec(kind="float", range=(0.0, 1.0)), cfg)
    assert got == (0.125, 0.375, 0.625, 0.875)


# selection rule --------------------------------------------------------------

def test_unvisited_entries_are_infinitely_attractive():
    assert ucb(("x", 0), ScoreTable(), small_config()) == math.inf


def test_ucb_closed_form():
    table = ScoreTable()
    table.iterations = 16
    for r in (0.6, 0.6, 0.6, 0.6):
        table.update(("Height", 2), r)
    got = ucb(("Height", 2), table, small_config(exploration=0.2))
    assert got == pytest.approx(0.6 + 0.2 * math.sqrt(math.log(16) / 4),
                                abs=1e-12)
    assert got == pytest.approx(0.76651092, abs=1e-8)


def test_ucb_without_exploitation_term():
    table = ScoreTable()
    table.iterations = 16
    for r in (0.6, 0.6, 0.6, 0.6):
        table.update(("Height", 2), r)
    got = ucb(("Height", 2), table, small_config(exploit=False))
    assert got == pytest.approx(0.2 * math.sqrt(math.log(16) / 4), abs=1e-12)


def test_score_table_running_mean():
    t = ScoreTable()
    for r in (1.0, 0.0, 0.5, 0.5):
        t.update(("W", 1), r)
    assert t.visits(("W", 1)) == 4
    assert t.mean(("W", 1)) == pytest.approx(0.5)
    assert t.visits(("W", 2)) == 0 and t.mean(("W", 2)) == 0.0


# search runs -----------------------------------------------------------------

def test_single_iteration_single_simulation_costs_one_evaluation(
        divboards, board_scene):
    res = run_search(divboards, board_scene,
                     small_config(iterations=1, simulations=1))
    assert res.evaluations == 1
    assert len(res.trace) == 1
    assert res.trace[0].evaluations == 1


def test_search_without_refinement_stays_on_the_grid(divboards, board_scene):
    cfg = small_config(iterations=12, simulations=3)
    res = run_search(divboards, board_scene, cfg)
    grids = {lv.name: lv.candidates for lv in res.tree.levels}
    for p in divboards.continuous_params():
        assert res.best.values[p.name] in grids[p.name]
    assert res.best.rotation in grids[ROTATION_LEVEL]
    np.testing.assert_array_equal(res.best.translation, [0.0, 0.0, 0.0])
    assert res.refine_evaluations == 0


def test_search_accounting_is_clean(divboards, board_scene):
    res = run_search(divboards, board_scene,
                     small_config(iterations=15, simulations=2))
    assert audit_search(res) == []
    evals = [row.evaluations for row in res.trace]
    assert evals == sorted(evals)
    assert res.trace[-1].evaluations == res.evaluations
    assert res.best_loss.total == res.trace[-1].best_loss


def test_identical_seeds_reproduce_the_trace(divboards, board_scene):
    cfg = small_config(iterations=8, simulations=2, seed=5)
    a = run_search(divboards, board_scene, cfg)
    b = run_search(divboards, board_scene, cfg)
    assert [(r.iteration, r.best_loss, r.evaluations) for r in a.trace] == \
           [(r.iteration, r.best_loss, r.evaluations) for r in b.trace]
    assert a.best.values == b.best.values


# refinement ------------------------------------------------------------------

def test_refine_never_leaves_a_worse_point(divboards, board_scene):
    from geonode.objective import loss
    start = default_assignment(divboards)
    _, br, _, _ = refine(divboards, board_scene, start,
                         small_config(refine=True, refine_steps=12))
    at_start = loss(evaluate(divboards, start, differentiable=False),
                    board_scene.views, board_scene.points, SMALL_LOSS)
    assert br.total <= at_start.total + 1e-12


def test_refine_pulls_width_back_within_a_centimeter(divboards, board_scene):
    start = default_assignment(divboards)
    start.values["Width"] += 0.10
    got, _, _, steps = refine(divboards, board_scene, start,
                              small_config(refine=True, refine_steps=100,
                                           refine_lr=0.05))
    assert steps == 100
    assert abs(got.values["Width"] - 0.5) < 0.01


def test_refine_with_zero_steps_is_identity(divboards, board_scene):
    start = default_assignment(divboards)
    start.values["Width"] = 0.62
    got, br, evals, steps = refine(divboards, board_scene, start,
                                   small_config(refine=True, refine_steps=0))
    assert steps == 0
    assert evals == 1          # one bookkeeping evaluation of the start point
    assert got.values == start.values
    assert got.rotation == start.rotation
    assert math.isfinite(br.total)


# random baseline -------------------------------------------------------------

def test_random_search_spends_exactly_its_budget(divboards, board_scene):
    res = random_search(divboards, board_scene, 15, small_config(seed=2))
    assert res.evaluations == 15
    assert len(res.trace) == 15
    assert audit_search(res) == []
    again = random_search(divboards, board_scene, 15, small_config(seed=2))
    assert again.best.values == res.best.values
    assert again.best_loss.total == res.best_loss.total
