"""Scene synthesis, persistence, metrics, and the experiment driver."""
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from geonode.evaluator import evaluate
from geonode.geometry import sample_surface
from geonode.graph import default_assignment, validate_assignment
from geonode.harness import (PROFILES, RunRecord, SceneMetrics, aggregate,
                             evals_to_threshold, evaluate_recovery,
                             generate_scene, gradient_check, gt_floor,
                             load_scene, metric_chamfer_cm, rotation_error_deg,
                             run_scene, sample_assignment, save_scene,
                             search_config_for, variant_config)
from geonode.objective import LossConfig
from geonode.search import SearchConfig, TraceRow


@pytest.fixture(scope="module")
def scene10(divboards):
    return generate_scene(divboards, seed=0)


def test_scene_defaults(divboards, scene10):
    assert len(scene10.views) == 10
    assert scene10.points.shape == (10000, 3)
    for v in scene10.views:
        assert v.depth.shape == (96, 96)
        assert (np.asarray(v.mask) == 1).all()
        assert (v.depth > 0).any()
    validate_assignment(divboards, scene10.gt)
    assert scene10.graph_name == "cabinet_divboards"


def test_single_view_scene_is_usable(divboards):
    scene = generate_scene(divboards, seed=3, n_views=1, n_points=500,
                           image_size=(48, 48))
    assert len(scene.views) == 1
    floor = gt_floor(divboards, scene, LossConfig(chamfer_samples=512))
    assert math.isfinite(floor.total)


def test_ground_truth_sits_on_the_sampling_floor(divboards, scene10):
    """At the ground truth the rendered views reproduce the observations
    exactly; what remains is the finite-sampling chamfer floor."""
    floor = gt_floor(divboards, scene10, LossConfig())
    assert floor.depth_term == 0.0
    assert floor.normal_term == 0.0
    assert floor.total == floor.lambda_chamfer * floor.chamfer_term
    assert 0.0 < floor.chamfer_term < 5e-3


def test_scene_directory_roundtrip(tmp_path, divboards):
    scene = generate_scene(divboards, seed=5, n_views=3, n_points=200,
                           image_size=(32, 32))
    save_scene(scene, tmp_path / "s", {"note": "roundtrip"})
    with open(tmp_path / "s" / "scene.json") as fh:
        manifest = json.load(fh)
    assert manifest["note"] == "roundtrip"
    assert manifest["n_views"] == 3

    back = load_scene(tmp_path / "s")
    assert back.graph_name == scene.graph_name and back.seed == 5
    assert back.gt.values == scene.gt.values
    assert back.gt.rotation == scene.gt.rotation
    np.testing.assert_allclose(back.points, scene.points, atol=1e-8)
    for a, b in zip(back.views, scene.views):
        np.testing.assert_allclose(a.depth, b.depth, atol=1e-5)  # f32 storage
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.camera.world_to_camera,
                                      b.camera.world_to_camera)


def test_scenes_are_seed_deterministic(divboards):
    a = generate_scene(divboards, seed=4, n_views=2, n_points=300,
                       image_size=(32, 32))
    b = generate_scene(divboards, seed=4, n_views=2, n_points=300,
                       image_size=(32, 32))
    assert a.gt.values == b.gt.values and a.gt.rotation == b.gt.rotation
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.views[1].depth, b.views[1].depth)
    c = generate_scene(divboards, seed=6, n_views=2, n_points=300,
                       image_size=(32, 32))
    assert c.gt.values != a.gt.values or c.gt.rotation != a.gt.rotation


# metrics ---------------------------------------------------------------------

def test_metric_chamfer_against_all_pairs(divboards):
    a = evaluate(divboards, default_assignment(divboards),
                 differentiable=False).mesh
    shifted = default_assignment(divboards)
    shifted.values["Width"] = 0.7
    b = evaluate(divboards, shifted, differentiable=False).mesh
    got = metric_chamfer_cm(a, b, n=512)

    pa, _, _ = sample_surface(a, 512, np.random.default_rng(7))
    pb, _, _ = sample_surface(b, 512, np.random.default_rng(8))
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    want = 100.0 * 0.5 * (np.sqrt(d2.min(axis=1)).mean()
                          + np.sqrt(d2.min(axis=0)).mean())
    assert got == pytest.approx(want, abs=1e-9)


def test_rotation_error_wraps_around():
    assert rotation_error_deg(math.radians(350.0),
                              math.radians(10.0)) == pytest.approx(20.0)
    assert rotation_error_deg(math.radians(359.0),
                              math.radians(1.0)) == pytest.approx(2.0)
    assert rotation_error_deg(0.0, math.pi) == pytest.approx(180.0)
    assert rotation_error_deg(-math.pi, math.pi) == pytest.approx(0.0)
    assert rotation_error_deg(math.radians(90.0), 0.0) == pytest.approx(90.0)


def test_recovery_of_the_exact_ground_truth(divboards):
    scene = generate_scene(divboards, seed=8, n_views=2, n_points=400,
                           image_size=(32, 32))
    m = evaluate_recovery(divboards, scene, scene.gt.copy())
    assert all(v == 0.0 for v in m.continuous_err_cm.values())
    assert m.rotation_err_deg == 0.0
    assert m.translation_err_cm == 0.0
    assert all(m.discrete_ok.values())
    assert m.chamfer_cm < 0.5          # pure sampling noise
    assert m.vertices > 0 and m.faces > 0


def test_recovery_measures_parameter_offsets(divboards):
    scene = generate_scene(divboards, seed=9, n_views=2, n_points=400,
                           image_size=(32, 32))
    rec = scene.gt.copy()
    rec.values["Width"] = float(rec.values["Width"]) + 0.02
    rec.values["Number of Dividing Boards"] = \
        int(rec.values["Number of Dividing Boards"]) % 7 + 2
    rec.translation = scene.gt.translation + np.array([0.03, 0.0, 0.04])
    m = evaluate_recovery(divboards, scene, rec)
    assert m.continuous_err_cm["Width"] == pytest.approx(2.0)
    assert not m.discrete_ok["Number of Dividing Boards"]
    assert m.translation_err_cm == pytest.approx(5.0)
    assert m.chamfer_cm > 0.0


# gradient check --------------------------------------------------------------

def test_tape_gradients_survive_a_quick_audit(divboards):
    assert gradient_check(divboards, trials=2) < 1e-3


# experiment plumbing ---------------------------------------------------------

def test_profiles_and_their_search_configs():
    ci = PROFILES["ci"]
    full = PROFILES["full"]
    assert ci.n_scenes == 20 and full.n_scenes == 20
    assert ci.iterations == 100 and full.iterations == 300
    cfg = search_config_for(full, seed=11)
    assert cfg.iterations == full.iterations
    assert cfg.simulations == full.simulations
    assert cfg.refine_steps == full.refine_steps
    assert cfg.seed == 11
    assert cfg.loss.chamfer_samples == full.chamfer_samples


def test_variant_config_toggles():
    base = search_config_for(PROFILES["ci"], seed=0)
    nr = variant_config(base, "no_refine")
    nrne = variant_config(base, "no_refine_no_exploit")
    assert base.refine and base.exploit            # base untouched
    assert not nr.refine and nr.exploit
    assert not nrne.refine and not nrne.exploit
    assert variant_config(base, "full").refine
    assert nr.iterations == base.iterations


def test_evals_to_threshold_scans_the_trace():
    rows = [TraceRow(1, 9.0, 4), TraceRow(2, 3.0, 8), TraceRow(3, 1.0, 12)]
    fake = SimpleNamespace(trace=rows)
    assert evals_to_threshold(fake, tau=3.5) == 8
    assert evals_to_threshold(fake, tau=0.5) is None


def test_aggregate_of_one_record_is_the_record():
    metrics = SceneMetrics(
        continuous_err_cm={"Width": 1.5, "Height": 0.5},
        rotation_err_deg=10.0, translation_err_cm=2.0,
        discrete_ok={"Has Back": True}, chamfer_cm=0.8,
        vertices=40, faces=60)
    rec = RunRecord(scene_seed=7, variant="full", metrics=metrics,
                    best_total=0.123, tau=0.2, evals_to_tau=33,
                    evaluations=120, refine_evaluations=40, wall_seconds=1.0)
    agg = aggregate([rec], ["full"])["full"]
    assert agg["scenes"] == 1
    assert agg["mae_cm"] == {"Width": 1.5, "Height": 0.5}
    assert agg["rotation_mae_deg"] == 10.0
    assert agg["discrete_accuracy"] == {"Has Back": 1.0}
    assert agg["all_discrete_correct"] == 1.0
    assert agg["evals_to_tau_mean"] == 33.0
    assert agg["censored"] == 0


def test_aggregate_censors_at_the_spent_budget():
    metrics = SceneMetrics({"W": 0.0}, 0.0, 0.0, {}, 0.0, 8, 12)
    hit = RunRecord(1, "full", metrics, 0.1, 0.2, 30, 100, 0, 1.0)
    missed = RunRecord(2, "full", metrics, 0.3, 0.2, None, 120, 0, 1.0)
    agg = aggregate([hit, missed], ["full"])["full"]
    assert agg["censored"] == 1
    assert agg["evals_to_tau_mean"] == (30 + 120) / 2.0
    assert agg["evals_to_tau_median"] == (30 + 120) / 2.0


def test_run_scene_produces_paired_records(divboards):
    scene = generate_scene(divboards, seed=12, n_views=2, n_points=300,
                           image_size=(32, 32))
    cfg = SearchConfig(iterations=6, simulations=2, refine_steps=5,
                       loss=LossConfig(chamfer_samples=256), seed=0)
    records = run_scene(divboards, scene, ("full", "random"), cfg)
    assert [r.variant for r in records] == ["full", "random"]
    full, rand = records
    assert rand.evaluations == full.evaluations   # budget-fair baseline
    assert full.tau == rand.tau > 0.0
    for r in records:
        assert r.audit_failures == ()
        assert r.scene_seed == 12
        assert math.isfinite(r.best_total)
        assert r.metrics.vertices > 0


def test_sample_assignment_respects_ranges(divboards, rng):
    for _ in range(25):
        a = sample_assignment(divboards, rng)
        validate_assignment(divboards, a)
        assert 0.0 <= a.rotation < 2.0 * math.pi
    fixed = sample_assignment(divboards, rng, rotate=False)
    assert fixed.rotation == 0.0
