"""Render-and-compare objective: depth, normal, and chamfer terms.

Camera convention is x right, y down, z forward (depth is the camera-space
z coordinate, in meters).  Pixels sample at their centers (col + 0.5,
row + 0.5).  Rasterization uses a per-triangle z-buffer without backface
culling and is not differentiated; gradients reach parameters only through
the chamfer term, whose sample positions are re-expressed in face index
plus barycentric coordinates so that vertex gradients have a closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .evaluator import EvalResult
from .geometry import (GeometryError, Mesh, sample_surface,
                       scatter_point_grads_to_vertices)


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "world_to_camera": [float(x) for x in
                                    np.asarray(self.world_to_camera).reshape(-1)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        m = np.array(d["world_to_camera"], dtype=float).reshape(4, 4)
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]),
                   float(d["fy"]), float(d["cx"]), float(d["cy"]), m)


def perspective_camera(width: int, height: int, fov_x: float) -> tuple[float, float, float, float]:
    """Square-pixel intrinsics for a horizontal field of view (radians)."""
    fx = 0.5 * width / math.tan(0.5 * fov_x)
    return fx, fx, 0.5 * width, 0.5 * height


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix with z pointing from eye toward target."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    z = fwd / n
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("look_at: view direction parallel to up")
    x = x / nx
    y = np.cross(z, x)
    m = np.eye(4)
    m[0, :3], m[1, :3], m[2, :3] = x, y, z
    m[:3, 3] = -m[:3, :3] @ eye
    return m


@dataclass
class ObservedView:
    depth: np.ndarray   # (H, W) float, 0 where no measurement
    mask: np.ndarray    # (H, W) bool-ish silhouette
    camera: Camera

    def observed_normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Normals of the observed depth, computed once and reused."""
        cached = getattr(self, "_obs_normals", None)
        if cached is None:
            cached = normals_from_depth(self.depth, self.camera)
            object.__setattr__(self, "_obs_normals", cached)
        return cached


def render_depth(mesh: Mesh, cam: Camera, near: float = 1e-4) -> np.ndarray:
    """Z-buffer depth render; 0 marks pixels no triangle covers.

    Triangles with any vertex at or behind the near plane are dropped
    rather than clipped, which is adequate for outside-in views.
    """
    h, w = cam.height, cam.width
    depth = np.full((h, w), np.inf)
    if mesh.is_empty:
        return np.zeros((h, w))
    m = cam.world_to_camera
    vc = mesh.vertices @ m[:3, :3].T + m[:3, 3]
    z = vc[:, 2]
    u = cam.fx * vc[:, 0] / z + cam.cx
    v = cam.fy * vc[:, 1] / z + cam.cy
    tri_z = z[mesh.faces]
    keep = (tri_z > near).all(axis=1)
    for f in np.nonzero(keep)[0]:
        i0, i1, i2 = mesh.faces[f]
        x0, y0, x1, y1, x2, y2 = u[i0], v[i0], u[i1], v[i1], u[i2], v[i2]
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(denom) < 1e-12:
            continue
        c_lo = max(0, int(math.ceil(min(x0, x1, x2) - 0.5)))
        c_hi = min(w - 1, int(math.floor(max(x0, x1, x2) - 0.5)))
        r_lo = max(0, int(math.ceil(min(y0, y1, y2) - 0.5)))
        r_hi = min(h - 1, int(math.floor(max(y0, y1, y2) - 0.5)))
        if c_lo > c_hi or r_lo > r_hi:
            continue
        px = np.arange(c_lo, c_hi + 1) + 0.5
        py = (np.arange(r_lo, r_hi + 1) + 0.5)[:, None]
        l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / denom
        l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / denom
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        zi = 1.0 / (l0 / z[i0] + l1 / z[i1] + l2 / z[i2])
        tile = depth[r_lo:r_hi + 1, c_lo:c_hi + 1]
        np.minimum(tile, np.where(inside, zi, np.inf), out=tile)
    depth[~np.isfinite(depth)] = 0.0
    return depth


def merge_depth(rendered: np.ndarray, observed: np.ndarray,
                mask: np.ndarray) -> np.ndarray:
    """Target depth map: rendered inside the mask, closest surface outside.

    Outside the mask the merged value is the minimum of the two depths
    with zeros treated as missing; 0 when both are missing.
    """
    m = np.asarray(mask).astype(bool)
    r = np.where(rendered > 0.0, rendered, np.inf)
    o = np.where(observed > 0.0, observed, np.inf)
    both = np.minimum(r, o)
    outside = np.where(np.isfinite(both), both, 0.0)
    return np.where(m, rendered, outside)


def normals_from_depth(depth: np.ndarray, cam: Camera
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel camera-space normals via central differences.

    Returns (normals (H, W, 3), valid (H, W)).  A pixel is valid when it
    and its four neighbors all carry depth and the cross product is
    non-degenerate.  Normals are oriented toward the camera, so a wall
    facing the camera head-on has normal (0, 0, -1).
    """
    h, w = depth.shape
    cols = np.arange(w) + 0.5
    rows = (np.arange(h) + 0.5)[:, None]
    x = (cols - cam.cx) * depth / cam.fx
    y = (rows - cam.cy) * depth / cam.fy
    pts = np.stack([x, y, depth], axis=-1)
    has = depth > 0.0
    valid = np.zeros((h, w), dtype=bool)
    valid[1:-1, 1:-1] = (has[1:-1, 1:-1] & has[1:-1, :-2] & has[1:-1, 2:]
                         & has[:-2, 1:-1] & has[2:, 1:-1])
    dx = np.zeros_like(pts)
    dy = np.zeros_like(pts)
    dx[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    length = np.linalg.norm(n, axis=-1)
    valid &= length > 1e-12
    out = np.zeros_like(pts)
    np.divide(n, length[..., None], out=out, where=valid[..., None])
    flip = (out * pts).sum(axis=-1) > 0.0
    out[flip] = -out[flip]
    out[~valid] = 0.0
    return out, valid


def chamfer_terms(points: np.ndarray, samples: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Two-sided mean-of-squared-nearest-neighbor distance between point sets.

    Returns (value, dvalue/dsamples); the nearest-neighbor pairing is held
    fixed during differentiation.
    """
    d_ps, idx_ps = cKDTree(samples).query(points)   # scene point -> sample
    d_sp, idx_sp = cKDTree(points).query(samples)   # sample -> scene point
    value = float(np.mean(d_ps ** 2) + np.mean(d_sp ** 2))
    gs = (2.0 / len(samples)) * (samples - points[idx_sp])
    np.add.at(gs, idx_ps, (2.0 / len(points)) * (samples[idx_ps] - points))
    return value, gs


def chamfer_loss(points: np.ndarray, mesh: Mesh, n_samples: int,
                 seed: int) -> tuple[float, np.ndarray]:
    """Symmetric mean-of-squared-nearest-neighbor distance, with gradients.

    Returns (value, dvalue/dvertices).  Sampling is driven entirely by the
    seed, so repeated calls at equal inputs are bitwise identical.  The
    nearest-neighbor pairing and the barycentric placement of samples are
    treated as constant during differentiation.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise GeometryError("chamfer_loss: need a non-empty (N, 3) point set")
    if mesh.is_empty:
        raise GeometryError("chamfer_loss: empty mesh")
    rng = np.random.default_rng(seed)
    samples, fidx, bary = sample_surface(mesh, n_samples, rng)
    value, gs = chamfer_terms(points, samples)
    gv = scatter_point_grads_to_vertices(mesh, fidx, bary, gs)
    return value, gv


@dataclass
class LossConfig:
    lambda_chamfer: float = 10.0
    chamfer_samples: int = 2048
    chamfer_seed: int = 0
    near: float = 1e-4
    with_views: bool = True
    with_chamfer: bool = True


@dataclass
class LossBreakdown:
    total: float
    depth_term: float
    normal_term: float
    chamfer_term: float            # raw, before the chamfer weight
    lambda_chamfer: float = 10.0
    per_view: list = field(default_factory=list)   # (depth_i, normal_i)


def view_terms(mesh: Mesh, view: ObservedView,
               near: float = 1e-4) -> tuple[float, float]:
    """Depth and normal discrepancy of one observation against the merged map.

    The merged map substitutes the candidate's rendered depth inside the
    object mask, so observed pixels the candidate fails to cover pay their
    full depth there, and a candidate protruding in front of observed
    background pays outside the mask via the nearest-surface rule.
    """
    rendered = render_depth(mesh, view.camera, near)
    merged = merge_depth(rendered, view.depth, view.mask)
    obs_ok = view.depth > 0.0
    depth_term = (float(np.abs(view.depth - merged)[obs_ok].mean())
                  if obs_ok.any() else 0.0)
    n_o, v_o = view.observed_normals()
    n_m, v_m = normals_from_depth(merged, view.camera)
    both = v_o & v_m
    normal_term = (float(np.abs(n_o - n_m)[both].mean())
                   if both.any() else 0.0)
    return depth_term, normal_term


def loss(result: EvalResult, views: list[ObservedView], points: np.ndarray,
         config: LossConfig | None = None) -> LossBreakdown:
    """Full objective: per-view depth and normal means summed over views,
    plus the weighted chamfer term against the scene point cloud."""
    cfg = config or LossConfig()
    views = views if cfg.with_views else []
    pts = np.asarray(points) if points is not None else np.zeros((0, 3))
    if not views and (not cfg.with_chamfer or len(pts) == 0):
        raise ValueError("loss: no views and no point cloud, nothing to compare")
    mesh = result.mesh
    depth_total = 0.0
    normal_total = 0.0
    per_view = []
    for view in views:
        d, n = view_terms(mesh, view, cfg.near)
        depth_total += d
        normal_total += n
        per_view.append((d, n))
    cd = 0.0
    if cfg.with_chamfer and len(pts):
        cd, _ = chamfer_loss(pts, mesh, cfg.chamfer_samples, cfg.chamfer_seed)
    total = depth_total + normal_total + cfg.lambda_chamfer * cd
    return LossBreakdown(total=total, depth_term=depth_total,
                         normal_term=normal_total, chamfer_term=cd,
                         lambda_chamfer=cfg.lambda_chamfer, per_view=per_view)
