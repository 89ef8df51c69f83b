"""Rendering, depth merging, normal maps, chamfer terms, combined loss."""
import math

import numpy as np
import pytest

from geonode.evaluator import evaluate
from geonode.geometry import (GeometryError, empty_mesh, make_cuboid,
                              sample_surface)
from geonode.graph import default_assignment
from geonode.objective import (Camera, LossConfig, ObservedView, chamfer_loss,
                               chamfer_terms, look_at, loss, merge_depth,
                               normals_from_depth, perspective_camera,
                               render_depth, view_terms)


def camera_at(eye, target=(0.0, 0.0, 0.0), w=48, h=48, fx=None):
    if fx is None:
        fx_, fy, cx, cy = perspective_camera(w, h, math.pi / 3)
    else:
        fx_, fy, cx, cy = fx, fx, 0.5 * w, 0.5 * h
    return Camera(w, h, fx_, fy, cx, cy, look_at(eye, target))


# depth rendering -------------------------------------------------------------

def test_cube_center_pixel_depth():
    # unit cube seen head-on from 2m: the front face sits at 1.5m
    cam = camera_at((0.0, 0.0, -2.0), w=64, h=64, fx=48.0)
    depth = render_depth(make_cuboid(1.0, 1.0, 1.0), cam)
    assert depth[32, 32] == pytest.approx(1.5, abs=1e-12)


def test_empty_mesh_renders_zeros():
    cam = camera_at((0.0, 0.0, -2.0))
    assert not render_depth(empty_mesh(), cam).any()


def test_cube_silhouette_area():
    # face spans fx * (1 / 1.5) = 32 pixels on a side at this distance
    cam = camera_at((0.0, 0.0, -2.0), w=64, h=64, fx=48.0)
    covered = (render_depth(make_cuboid(1.0, 1.0, 1.0), cam) > 0).sum()
    assert 30 ** 2 <= covered <= 34 ** 2


def test_behind_camera_geometry_is_dropped():
    cam = camera_at((0.0, 0.0, -2.0))
    box = make_cuboid(0.5, 0.5, 0.5)
    behind = box.vertices + np.array([0.0, 0.0, -4.0])
    assert not render_depth(type(box)(behind, box.faces), cam).any()


# depth merging ---------------------------------------------------------------

def test_merge_full_mask_keeps_rendered(rng):
    rendered = rng.uniform(0.5, 3.0, (8, 8))
    observed = rng.uniform(0.5, 3.0, (8, 8))
    merged = merge_depth(rendered, observed, np.ones((8, 8)))
    np.testing.assert_array_equal(merged, rendered)


def test_merge_empty_mask_prefers_closer_surface():
    rendered = np.full((4, 4), 2.0)
    observed = np.full((4, 4), 1.0)
    merged = merge_depth(rendered, observed, np.zeros((4, 4)))
    np.testing.assert_array_equal(merged, observed)


def test_merge_per_pixel_oracle(rng):
    rendered = rng.uniform(0.5, 3.0, (6, 6))
    observed = rng.uniform(0.5, 3.0, (6, 6))
    rendered[rng.random((6, 6)) < 0.3] = 0.0
    observed[rng.random((6, 6)) < 0.3] = 0.0
    mask = rng.random((6, 6)) < 0.5
    merged = merge_depth(rendered, observed, mask)
    for r in range(6):
        for c in range(6):
            if mask[r, c]:
                want = rendered[r, c]
            else:
                present = [d for d in (rendered[r, c], observed[r, c]) if d > 0]
                want = min(present) if present else 0.0
            assert merged[r, c] == want, (r, c)


# normals ---------------------------------------------------------------------

def test_frontal_wall_normals_face_the_camera():
    cam = camera_at((0.0, 0.0, -2.0), w=64, h=64, fx=48.0)
    depth = render_depth(make_cuboid(1.0, 1.0, 1.0), cam)
    normals, valid = normals_from_depth(depth, cam)
    assert valid.sum() > 500
    got = normals[valid]
    np.testing.assert_allclose(got, np.tile([0.0, 0.0, -1.0], (len(got), 1)),
                               atol=1e-9)


def test_tilted_plane_normals_analytic():
    """Synthetic depth of a plane z = z0 + x (camera space): its normal is
    (1, 0, -1)/sqrt(2) once oriented toward the camera."""
    w = h = 32
    fx = 48.0
    cam = Camera(w, h, fx, fx, 0.5 * w, 0.5 * h, np.eye(4))
    u = np.arange(w) + 0.5 - cam.cx
    depth = np.broadcast_to(2.0 / (1.0 - u / fx), (h, w)).copy()
    normals, valid = normals_from_depth(depth, cam)
    assert valid[1:-1, 1:-1].all()
    want = np.array([1.0, 0.0, -1.0]) / math.sqrt(2.0)
    got = normals[valid]
    np.testing.assert_allclose(got, np.tile(want, (len(got), 1)), atol=1e-6)


def test_normals_need_full_neighborhoods():
    cam = camera_at((0.0, 0.0, -2.0), w=16, h=16)
    normals, valid = normals_from_depth(np.zeros((16, 16)), cam)
    assert not valid.any()
    assert not normals.any()
    # a single missing pixel knocks out its four neighbors too
    depth = np.full((16, 16), 2.0)
    depth[8, 8] = 0.0
    _, valid = normals_from_depth(depth, cam)
    assert not valid[8, 8] and not valid[8, 7] and not valid[7, 8]


# chamfer ---------------------------------------------------------------------

def test_chamfer_of_mesh_against_its_own_samples_is_zero():
    mesh = make_cuboid(0.4, 0.7, 0.3)
    pts, _, _ = sample_surface(mesh, 256, np.random.default_rng(11))
    value, grads = chamfer_loss(pts, mesh, 256, seed=11)
    assert value == 0.0
    assert not grads.any()


def test_chamfer_matches_all_pairs_oracle(rng):
    for _ in range(5):
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(25, 3))
        value, _ = chamfer_terms(a, b)
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        want = d2.min(axis=1).mean() + d2.min(axis=0).mean()
        assert value == pytest.approx(want, abs=1e-9)


def test_chamfer_directions_sum(rng):
    a = rng.normal(size=(30, 3))
    b = rng.normal(size=(30, 3)) + np.array([5.0, 0.0, 0.0])
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    fwd = d2.min(axis=1).mean()
    back = d2.min(axis=0).mean()
    value, _ = chamfer_terms(a, b)
    assert value == pytest.approx(fwd + back, rel=1e-12)
    assert fwd != back  # the split is real for these sets


def test_chamfer_sample_gradients_match_fd(rng):
    points = rng.normal(size=(20, 3))
    samples = rng.normal(size=(12, 3))
    _, gs = chamfer_terms(points, samples)
    h = 1e-7
    for j, c in ((3, 0), (7, 1), (11, 2)):
        up = samples.copy()
        up[j, c] += h
        dn = samples.copy()
        dn[j, c] -= h
        fd = (chamfer_terms(points, up)[0] - chamfer_terms(points, dn)[0]) / (2 * h)
        assert gs[j, c] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_chamfer_rejects_degenerate_inputs():
    mesh = make_cuboid(1.0, 1.0, 1.0)
    with pytest.raises(GeometryError, match="non-empty"):
        chamfer_loss(np.zeros((0, 3)), mesh, 16, seed=0)
    with pytest.raises(GeometryError, match="empty mesh"):
        chamfer_loss(np.zeros((4, 3)), empty_mesh(), 16, seed=0)


# combined loss ---------------------------------------------------------------

def _observe(mesh, eyes):
    views = []
    for eye in eyes:
        cam = camera_at(eye, target=(0.0, 0.3, 0.0))
        depth = render_depth(mesh, cam)
        views.append(ObservedView(depth=depth, mask=depth > 0, camera=cam))
    return views


EYES = ((0.0, 0.5, -1.6), (1.2, 0.8, -1.0))


def test_ground_truth_view_terms_vanish(divboards):
    mesh = evaluate(divboards, default_assignment(divboards)).mesh
    for view in _observe(mesh, EYES):
        d, n = view_terms(mesh, view)
        assert d == 0.0 and n == 0.0


def test_widening_the_shape_raises_the_loss(divboards):
    gt = evaluate(divboards, default_assignment(divboards))
    views = _observe(gt.mesh, EYES)
    points, _, _ = sample_surface(gt.mesh, 600, np.random.default_rng(3))
    cfg = LossConfig(chamfer_samples=512)
    at_gt = loss(gt, views, points, cfg)

    wide = default_assignment(divboards)
    wide.values["Width"] += 0.1
    bumped = loss(evaluate(divboards, wide), views, points, cfg)
    assert bumped.total > at_gt.total
    assert at_gt.depth_term == 0.0 and at_gt.normal_term == 0.0


def test_zero_chamfer_weight_leaves_view_terms(divboards):
    gt = evaluate(divboards, default_assignment(divboards))
    a = default_assignment(divboards)
    a.values["Height"] += 0.2
    res = evaluate(divboards, a)
    views = _observe(gt.mesh, EYES)
    points, _, _ = sample_surface(gt.mesh, 400, np.random.default_rng(9))
    br = loss(res, views, points, LossConfig(lambda_chamfer=0.0,
                                             chamfer_samples=256))
    assert br.total == br.depth_term + br.normal_term
    assert br.chamfer_term > 0.0
    assert len(br.per_view) == 2
    assert br.depth_term == pytest.approx(sum(d for d, _ in br.per_view))


def test_loss_requires_something_to_compare(divboards):
    res = evaluate(divboards, default_assignment(divboards))
    with pytest.raises(ValueError, match="nothing to compare"):
        loss(res, [], None, LossConfig(with_chamfer=False))
    with pytest.raises(ValueError, match="nothing to compare"):
        loss(res, [], np.zeros((0, 3)))


# camera plumbing -------------------------------------------------------------

def test_camera_dict_roundtrip():
    cam = camera_at((0.3, 1.0, -2.0), target=(0.0, 0.2, 0.1))
    again = Camera.from_dict(cam.to_dict())
    assert (again.width, again.height) == (cam.width, cam.height)
    assert again.fx == cam.fx and again.cy == cam.cy
    np.testing.assert_array_equal(again.world_to_camera, cam.world_to_camera)


def test_look_at_rejects_degenerate_setups():
    with pytest.raises(ValueError, match="coincide"):
        look_at((1.0, 2.0, 3.0), (1.0, 2.0, 3.0))
    with pytest.raises(ValueError, match="parallel to up"):
        look_at((0.0, 2.0, 0.0), (0.0, 0.0, 0.0))


def test_look_at_maps_target_onto_the_axis():
    m = look_at((0.4, 1.2, -2.0), (0.1, 0.3, 0.5))
    p = m[:3, :3] @ np.array([0.1, 0.3, 0.5]) + m[:3, 3]
    assert p[0] == pytest.approx(0.0, abs=1e-12)
    assert p[1] == pytest.approx(0.0, abs=1e-12)
    assert p[2] == pytest.approx(np.linalg.norm([0.3, 0.9, -2.5]), rel=1e-12)
