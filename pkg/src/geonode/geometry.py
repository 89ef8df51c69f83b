"""Mesh construction kernels and mesh utilities.

All constructors here are pure numpy.  The differentiable evaluator reuses
the same sign tables and face layouts, so both routes agree on topology and
vertex order exactly.

Conventions: units are meters and radians, y is up, triangles wind
counter-clockwise seen from outside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS_DIM = 1e-4   # smallest admissible extent, radius, or scale component


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray     # (M, 3) int64, indices into vertices

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_empty:
            z = np.zeros(3)
            return z, z
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray  # (N, 3) float64

    @property
    def n_points(self) -> int:
        return len(self.points)


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


@dataclass(frozen=True)
class RigidTransformParams:
    """Scale, then rotate (Euler x-y-z, x applied first), then translate."""
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)


# canonical topologies --------------------------------------------------------

# corner sign pattern: x varies fastest, matching binary order of the index
CUBOID_SIGNS = np.array(
    [[-1, -1, -1], [1, -1, -1], [-1, 1, -1], [1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [-1, 1, 1], [1, 1, 1]], dtype=float)

CUBOID_FACES = np.array([
    [0, 2, 3], [0, 3, 1],  # z = -h (back)
    [4, 5, 7], [4, 7, 6],  # z = +h (front)
    [0, 1, 5], [0, 5, 4],  # y = -h (bottom)
    [2, 6, 7], [2, 7, 3],  # y = +h (top)
    [0, 4, 6], [0, 6, 2],  # x = -h (left)
    [1, 3, 7], [1, 7, 5],  # x = +h (right)
], dtype=np.int64)


def cylinder_faces(segments: int) -> np.ndarray:
    """Faces for the canonical cylinder layout.

    Vertices: bottom ring [0, s), top ring [s, 2s), bottom center 2s,
    top center 2s+1.  2s+2 vertices, 4s faces.
    """
    s = segments
    nxt = [(i + 1) % s for i in range(s)]
    faces = []
    for i in range(s):
        j = nxt[i]
        faces.append([i, s + i, j])          # side lower
        faces.append([j, s + i, s + j])      # side upper
        faces.append([2 * s, i, j])          # bottom cap, faces -y
        faces.append([2 * s + 1, s + j, s + i])  # top cap, faces +y
    return np.array(faces, dtype=np.int64)


# constructors ----------------------------------------------------------------

def _check_finite(name: str, *vals: float) -> None:
    for v in vals:
        if not math.isfinite(v):
            raise GeometryError(f"{name}: non-finite dimension {v!r}")


def make_cuboid(size_x: float, size_y: float, size_z: float) -> Mesh:
    """Axis-aligned box centered at the origin (8 vertices, 12 faces)."""
    _check_finite("cuboid", size_x, size_y, size_z)
    h = np.array([max(size_x, EPS_DIM), max(size_y, EPS_DIM),
                  max(size_z, EPS_DIM)]) * 0.5
    return Mesh(CUBOID_SIGNS * h, CUBOID_FACES.copy())


def make_cylinder(radius: float, depth: float, segments: int) -> Mesh:
    """Capped cylinder along y, centered at the origin."""
    _check_finite("cylinder", radius, depth)
    if not isinstance(segments, (int, np.integer)):
        raise GeometryError(f"cylinder: segments must be an int, got {segments!r}")
    if segments < 3:
        raise GeometryError(f"cylinder: need at least 3 segments, got {segments}")
    r = max(radius, EPS_DIM)
    h = max(depth, EPS_DIM) * 0.5
    ang = 2.0 * math.pi * np.arange(segments) / segments
    cx = r * np.cos(ang)
    cz = r * np.sin(ang)
    verts = np.empty((2 * segments + 2, 3))
    verts[:segments, 0] = cx
    verts[:segments, 1] = -h
    verts[:segments, 2] = cz
    verts[segments:2 * segments, 0] = cx
    verts[segments:2 * segments, 1] = h
    verts[segments:2 * segments, 2] = cz
    verts[2 * segments] = (0.0, -h, 0.0)
    verts[2 * segments + 1] = (0.0, h, 0.0)
    return Mesh(verts, cylinder_faces(segments))


def mesh_line(count: int, start, offset) -> PointSet:
    """count points: start, start + offset, ..., start + (count-1) * offset."""
    if not isinstance(count, (int, np.integer)):
        raise GeometryError(f"mesh_line: count must be an int, got {count!r}")
    if count <= 0:
        raise GeometryError(f"mesh_line: count must be positive, got {count}")
    start = np.asarray(start, dtype=float)
    offset = np.asarray(offset, dtype=float)
    k = np.arange(count, dtype=float)[:, None]
    return PointSet(start[None, :] + k * offset[None, :])


def points_on_instances(points: PointSet, instance: Mesh) -> Mesh:
    """Copy of the instance mesh at every point, all copies joined."""
    na, nt = points.n_points, instance.n_vertices
    if na == 0 or nt == 0:
        return empty_mesh()
    verts = (points.points[:, None, :] + instance.vertices[None, :, :]).reshape(-1, 3)
    offs = (np.arange(na, dtype=np.int64) * nt)[:, None, None]
    faces = (instance.faces[None, :, :] + offs).reshape(-1, 3)
    return Mesh(verts, faces)


def join_geometry(parts: list[Mesh]) -> Mesh:
    parts = [p for p in parts if not p.is_empty]
    if not parts:
        return empty_mesh()
    if len(parts) == 1:
        return parts[0]
    verts = np.vstack([p.vertices for p in parts])
    off = 0
    faces = []
    for p in parts:
        faces.append(p.faces + off)
        off += p.n_vertices
    return Mesh(verts, np.vstack(faces))


def euler_xyz_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation matrix for Euler angles applied in x, y, z order."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rx_m = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry_m = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz_m = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz_m @ ry_m @ rx_m


def apply_transform(mesh: Mesh, t: RigidTransformParams) -> Mesh:
    if mesh.is_empty:
        return mesh
    for v in (*t.translation, *t.rotation, *t.scale):
        if not math.isfinite(v):
            raise GeometryError(f"transform: non-finite component {v!r}")
    s = np.maximum(np.asarray(t.scale, dtype=float), EPS_DIM)
    r = euler_xyz_matrix(*t.rotation)
    verts = (mesh.vertices * s) @ r.T + np.asarray(t.translation, dtype=float)
    return Mesh(verts, mesh.faces)


# measurement and sampling ----------------------------------------------------

def face_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    a = v[f[:, 1]] - v[f[:, 0]]
    b = v[f[:, 2]] - v[f[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def surface_area(mesh: Mesh) -> float:
    return float(face_areas(mesh).sum()) if not mesh.is_empty else 0.0


def signed_volume(mesh: Mesh) -> float:
    """Divergence-theorem volume; positive when faces wind outward."""
    if mesh.is_empty:
        return 0.0
    v = mesh.vertices
    f = mesh.faces
    return float(np.einsum("ij,ij->i", v[f[:, 0]],
                           np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted surface samples.

    Returns (points (n,3), face index (n,), barycentric coords (n,3)).
    The face and barycentric draw lets callers re-evaluate the same sample
    locations on a deformed copy of the mesh.
    """
    if mesh.is_empty or n <= 0:
        raise GeometryError("sample_surface: empty mesh or non-positive count")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise GeometryError("sample_surface: degenerate mesh with zero area")
    fidx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    pts = interpolate_on_faces(mesh, fidx, bary)
    return pts, fidx, bary


def interpolate_on_faces(mesh: Mesh, fidx: np.ndarray, bary: np.ndarray) -> np.ndarray:
    tri = mesh.vertices[mesh.faces[fidx]]       # (n, 3, 3)
    return np.einsum("nk,nkj->nj", bary, tri)


def scatter_point_grads_to_vertices(mesh: Mesh, fidx: np.ndarray,
                                    bary: np.ndarray, gpts: np.ndarray) -> np.ndarray:
    """Adjoint of interpolate_on_faces: (N_vertices, 3) gradient array."""
    gv = np.zeros_like(mesh.vertices)
    corners = mesh.faces[fidx]                  # (n, 3)
    for k in range(3):
        np.add.at(gv, corners[:, k], bary[:, k:k + 1] * gpts)
    return gv


# serialization ---------------------------------------------------------------

def _fmt(x: float) -> str:
    if x == 0.0:
        x = 0.0  # normalize -0.0
    return format(x, ".9g")


def obj_lines(mesh: Mesh, comments: list[str] | None = None) -> list[str]:
    """Canonical OBJ text: 9 significant digits, v then f, 1-based indices."""
    lines = [f"# {c}" for c in (comments or [])]
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    return lines


def write_obj(mesh: Mesh, path, comments: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(obj_lines(mesh, comments)) + "\n")
