"""Differentiable interpreter for shape programs.

One evaluation walks the graph in topological order and produces a mesh
plus a gradient tape.  Continuous parameters and the object pose enter as
tape inputs; discrete parameters stay plain Python values, so any subgraph
they fully determine computes on raw numpy and is eligible for caching.

The same interpreter also fills a NodeCache: cache-eligible geometry nodes
are stored under (node id, discrete fingerprint) and later evaluations
reuse the frozen arrays directly, which is safe precisely because such
nodes carry no continuous-parameter gradients.

Thread safety: a NodeCache may be shared across threads.  Entries are
complete, immutable (read-only arrays) and inserted with a single dict
assignment, which is atomic under the GIL; a missed lookup at worst
recomputes a value that an insert then makes redundant.
"""
from __future__ import annotations

import math
import pickle
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tape, Value, clamp_min, cos, sin, value_of
from .geometry import (CUBOID_FACES, CUBOID_SIGNS, EPS_DIM, Mesh,
                       cylinder_faces)
from .graph import (MESH, POINTS, ParameterAssignment, ShapeGraph, Const, Ref,
                    validate_assignment)

DIV_GUARD = 1e-9

# node kinds whose geometry outputs are worth caching
_GEO_KINDS = frozenset({"primitive", "transform", "mesh_line",
                        "points_on_instances", "join", "switch"})


class EvaluationError(RuntimeError):
    """Runtime failure inside a shape program; message names the node."""


class _MeshVal:
    __slots__ = ("data", "ref", "faces")

    def __init__(self, data, ref, faces):
        self.data = data    # (N, 3) float64
        self.ref = ref      # tape block index or None
        self.faces = faces  # (M, 3) int64


class _PtsVal:
    __slots__ = ("data", "ref")

    def __init__(self, data, ref):
        self.data = data
        self.ref = ref


_EMPTY_V = np.zeros((0, 3))
_EMPTY_F = np.zeros((0, 3), dtype=np.int64)
_EMPTY_V.setflags(write=False)
_EMPTY_F.setflags(write=False)


class NodeCache:
    """Keyed store of frozen node outputs, shared across evaluations."""

    def __init__(self):
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value) -> None:
        self._store[key] = value

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self._store, fh)

    @classmethod
    def load(cls, path) -> "NodeCache":
        c = cls()
        with open(path, "rb") as fh:
            c._store = pickle.load(fh)
        return c


@dataclass
class EvalResult:
    mesh: Mesh
    tape: Tape
    block: int | None               # tape block of the posed vertices
    assignment: ParameterAssignment
    forward_seconds: float
    executed: list[int]             # node ids computed this call
    cache_hits: list[int]


@lru_cache(maxsize=32)
def _ring_tables(segments: int):
    ang = 2.0 * math.pi * np.arange(segments) / segments
    return np.cos(ang), np.sin(ang), cylinder_faces(segments)


def _tile_faces(faces: np.ndarray, n_anchors: int, n_verts: int) -> np.ndarray:
    offs = (np.arange(n_anchors, dtype=np.int64) * n_verts)[:, None, None]
    return (faces[None, :, :] + offs).reshape(-1, 3)


def _is_plain_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, (bool, np.bool_))


def _check_finite_val(nid: int, val) -> None:
    if isinstance(val, (_MeshVal, _PtsVal)):
        if val.data.size and not np.isfinite(val.data).all():
            raise EvaluationError(f"node {nid}: non-finite geometry")
    elif isinstance(val, tuple):
        for x in val:
            _check_finite_val(nid, x)
    elif isinstance(val, (bool, np.bool_)):
        pass
    else:
        if not math.isfinite(value_of(val)):
            raise EvaluationError(f"node {nid}: non-finite value {value_of(val)!r}")


# node kernels ----------------------------------------------------------------

def _k_math(tape, node, ins):
    op = node.attrs["op"]
    a, b = ins
    if op == "add":
        return a + b
    if op == "subtract":
        return a - b
    if op == "multiply":
        return a * b
    if op == "divide":
        den = value_of(b)
        if abs(den) < DIV_GUARD:
            raise EvaluationError(
                f"node {node.id}: division by near-zero denominator {den!r}")
        return a / b
    if op == "greater_than":
        return bool(value_of(a) > value_of(b))
    return bool(value_of(a) < value_of(b))


def _k_primitive(tape, node, ins):
    if node.attrs["shape"] == "cuboid":
        sx, sy, sz = ins[0]
        hx = clamp_min(sx, EPS_DIM) * 0.5
        hy = clamp_min(sy, EPS_DIM) * 0.5
        hz = clamp_min(sz, EPS_DIM) * 0.5
        if not (isinstance(hx, Value) or isinstance(hy, Value)
                or isinstance(hz, Value)):
            data = CUBOID_SIGNS * np.array([hx, hy, hz])
            return _MeshVal(data, None, CUBOID_FACES)
        nx, ny, nz = -hx, -hy, -hz
        picks = ((nx, hx), (ny, hy), (nz, hz))
        rows = [tuple(picks[c][1 if CUBOID_SIGNS[r, c] > 0 else 0]
                      for c in range(3)) for r in range(8)]
        data, ref = tape.gather(rows)
        return _MeshVal(data, ref, CUBOID_FACES)
    # cylinder along y
    r_in, d_in = ins
    seg = node.attrs["segments"]
    cos_t, sin_t, faces = _ring_tables(seg)
    rad = clamp_min(r_in, EPS_DIM)
    half = clamp_min(d_in, EPS_DIM) * 0.5
    if not (isinstance(rad, Value) or isinstance(half, Value)):
        verts = np.empty((2 * seg + 2, 3))
        verts[:seg, 0] = rad * cos_t
        verts[:seg, 1] = -half
        verts[:seg, 2] = rad * sin_t
        verts[seg:2 * seg, 0] = verts[:seg, 0]
        verts[seg:2 * seg, 1] = half
        verts[seg:2 * seg, 2] = verts[:seg, 2]
        verts[2 * seg] = (0.0, -half, 0.0)
        verts[2 * seg + 1] = (0.0, half, 0.0)
        return _MeshVal(verts, None, faces)
    nhalf = -half
    rows = []
    ring = [(rad * float(cos_t[i]), rad * float(sin_t[i])) for i in range(seg)]
    for x, z in ring:
        rows.append((x, nhalf, z))
    for x, z in ring:
        rows.append((x, half, z))
    rows.append((0.0, nhalf, 0.0))
    rows.append((0.0, half, 0.0))
    data, ref = tape.gather(rows)
    return _MeshVal(data, ref, faces)


def _rot_rows(rx, ry, rz):
    """Euler x-y-z rotation entries as scalar expressions (x applied first)."""
    cx, sx = cos(rx), sin(rx)
    cy, sy = cos(ry), sin(ry)
    cz, sz = cos(rz), sin(rz)
    return (
        (cz * cy, cz * (sy * sx) - sz * cx, cz * (sy * cx) + sz * sx),
        (sz * cy, sz * (sy * sx) + cz * cx, sz * (sy * cx) - cz * sx),
        (-sy, cy * sx, cy * cx),
    )


def _k_transform(tape, node, ins):
    mesh, trans, rot, scale = ins
    if len(mesh.data) == 0:
        return mesh
    rows = _rot_rows(*rot)
    sc = tuple(clamp_min(s, EPS_DIM) for s in scale)
    data, ref = tape.affine(mesh.data, mesh.ref, rows, sc, tuple(trans))
    return _MeshVal(data, ref, mesh.faces)


def _k_mesh_line(tape, node, ins):
    count, start, offset = ins
    if not _is_plain_int(count):
        raise EvaluationError(
            f"node {node.id}: point count must be a discrete integer, "
            f"got {count!r}")
    if count <= 0:
        raise EvaluationError(f"node {node.id}: point count must be positive, "
                              f"got {count}")
    rows = []
    for k in range(count):
        rows.append(tuple(start[c] + float(k) * offset[c] for c in range(3)))
    data, ref = tape.gather(rows)
    return _PtsVal(data, ref)


def _k_points_on_instances(tape, node, ins):
    pts, inst = ins
    na, nt = len(pts.data), len(inst.data)
    if na == 0 or nt == 0:
        return _MeshVal(_EMPTY_V, None, _EMPTY_F)
    data, ref = tape.instance(inst.data, inst.ref, pts.data, pts.ref)
    return _MeshVal(data, ref, _tile_faces(inst.faces, na, nt))


def _k_join(tape, node, ins):
    parts = [m for m in ins if len(m.data)]
    if not parts:
        return _MeshVal(_EMPTY_V, None, _EMPTY_F)
    if len(parts) == 1:
        return parts[0]
    data, ref = tape.concat([(m.data, m.ref) for m in parts])
    faces = []
    off = 0
    for m in parts:
        faces.append(m.faces + off)
        off += len(m.data)
    return _MeshVal(data, ref, np.vstack(faces))


def _exec_kernel(tape: Tape, node, ins):
    kind = node.kind
    if kind == "math":
        return _k_math(tape, node, ins)
    if kind == "combine":
        return tuple(ins)
    if kind == "primitive":
        return _k_primitive(tape, node, ins)
    if kind == "transform":
        return _k_transform(tape, node, ins)
    if kind == "mesh_line":
        return _k_mesh_line(tape, node, ins)
    if kind == "points_on_instances":
        return _k_points_on_instances(tape, node, ins)
    if kind == "join":
        return _k_join(tape, node, ins)
    return ins[0]  # output


def _run_nodes(graph: ShapeGraph, pvals: dict, a_values: dict, tape: Tape,
               cache: NodeCache | None, only_cacheable: bool,
               executed: list[int], hits: list[int]) -> dict:
    """Interpret the graph demand-driven; returns the per-node value map.

    Execution is pulled from the output, so a cache hit prunes the whole
    subtree behind it and a switch runs only the branch it takes.
    """
    vals: dict[int, object] = {}

    def value_for(src):
        if isinstance(src, Const):
            v = src.value
            if isinstance(v, list):
                return tuple(float(x) for x in v)
            return v
        node = graph.node(src.node)
        if node.kind == "input":
            return pvals[graph.parameters[src.socket].name]
        return compute(src.node)

    def compute(nid: int):
        if nid in vals:
            return vals[nid]
        node = graph.node(nid)
        meta = graph.meta[nid]
        key = None
        if (cache is not None and node.kind in _GEO_KINDS and meta.cacheable
                and meta.out_category in (MESH, POINTS)):
            key = (nid, tuple(a_values[d] for d in meta.discrete_deps))
            stored = cache.get(key)
            if stored is not None:
                hits.append(nid)
                if stored[0] == "mesh":
                    out = _MeshVal(stored[1], None, stored[2])
                else:
                    out = _PtsVal(stored[1], None)
                vals[nid] = out
                return out
        if node.kind == "switch":
            branch = node.inputs[2] if value_for(node.inputs[0]) \
                else node.inputs[1]
            out = value_for(branch)   # already checked at its producer
        else:
            ins = [value_for(s) for s in node.inputs]
            out = _exec_kernel(tape, node, ins)
            if node.kind != "output":
                _check_finite_val(nid, out)
        executed.append(nid)
        if key is not None:
            out.data.setflags(write=False)
            if isinstance(out, _MeshVal):
                cache.put(key, ("mesh", out.data, out.faces))
            else:
                cache.put(key, ("points", out.data))
        vals[nid] = out
        return out

    if only_cacheable:
        for nid in graph.topo:
            node = graph.node(nid)
            if node.kind == "input" or graph.meta[nid].needs_float:
                continue
            compute(nid)
    else:
        compute(graph.output_id)
    return vals


def evaluate(graph: ShapeGraph, assignment: ParameterAssignment,
             cache: NodeCache | None = None,
             differentiable: bool = True) -> EvalResult:
    """Run the shape program and pose the result.

    With differentiable=True, float parameters and the pose become tape
    inputs and the result carries a gradient tape; otherwise everything
    stays plain and the tape comes back empty.  Only nodes reachable
    through taken switch branches execute.
    """
    validate_assignment(graph, assignment)
    t0 = time.perf_counter()
    tape = Tape()
    pvals: dict[str, object] = {}
    for p in graph.parameters:
        v = assignment.values[p.name]
        if p.kind == "float":
            pvals[p.name] = (tape.input(p.name, float(v)) if differentiable
                             else float(v))
        elif p.kind == "int":
            pvals[p.name] = int(v)
        else:
            pvals[p.name] = bool(v)
    executed: list[int] = []
    hits: list[int] = []
    vals = _run_nodes(graph, pvals, assignment.values, tape, cache,
                      False, executed, hits)
    out = vals[graph.output_id]

    if differentiable:
        rv = tape.input("pose.rotation", assignment.rotation)
        tx = tape.input("pose.tx", float(assignment.translation[0]))
        ty = tape.input("pose.ty", float(assignment.translation[1]))
        tz = tape.input("pose.tz", float(assignment.translation[2]))
    else:
        rv = assignment.rotation
        tx, ty, tz = (float(x) for x in assignment.translation)
    c, s = cos(rv), sin(rv)
    rows = ((c, 0.0, s), (0.0, 1.0, 0.0), (-s, 0.0, c))
    data, block = tape.affine(out.data, out.ref, rows, (1.0, 1.0, 1.0),
                              (tx, ty, tz))
    mesh = Mesh(data, out.faces)
    return EvalResult(mesh=mesh, tape=tape, block=block, assignment=assignment,
                      forward_seconds=time.perf_counter() - t0,
                      executed=executed, cache_hits=hits)


def backward(result: EvalResult, vertex_grads: np.ndarray) -> dict[str, float]:
    """Pull vertex-space gradients back to named parameter gradients.

    Returns one entry per continuous parameter plus pose.rotation and
    pose.tx/ty/tz.  Parameters that never influenced the mesh get 0.
    """
    vg = np.asarray(vertex_grads, dtype=float)
    if vg.shape != result.mesh.vertices.shape:
        raise ValueError(f"vertex_grads shape {vg.shape} does not match mesh "
                         f"{result.mesh.vertices.shape}")
    if result.block is None:
        return {name: 0.0 for name in result.tape.inputs}
    adj = result.tape.backward({result.block: vg})
    return result.tape.grad(adj)


def warm_cache(graph: ShapeGraph, cache: NodeCache,
               discrete_values: dict[str, int | bool]) -> int:
    """Precompute every cache-eligible node for one discrete fingerprint.

    Returns the number of nodes executed.  Continuous parameters are not
    needed: no cache-eligible node depends on one.
    """
    pvals: dict[str, object] = {}
    values: dict[str, object] = {}
    for p in graph.parameters:
        if p.kind == "float":
            pvals[p.name] = p.default
            values[p.name] = p.default
        else:
            v = discrete_values.get(p.name, p.default)
            pvals[p.name] = int(v) if p.kind == "int" else bool(v)
            values[p.name] = pvals[p.name]
    executed: list[int] = []
    hits: list[int] = []
    _run_nodes(graph, pvals, values, Tape(), cache, True, executed, hits)
    return len(executed)
