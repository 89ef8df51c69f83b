"""Shape program representation: parameters, nodes, validation, ordering.

A shape program is a DAG of geometry nodes driven by named parameters.
This module owns the wire format (versioned JSON), structural validation
with complete diagnostics, deterministic topological ordering, and the
static analysis that marks which nodes depend only on discrete parameters
(those are the cache-eligible ones).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

WIRE_VERSION = "1"

MATH_OPS = ("add", "subtract", "multiply", "divide", "greater_than", "less_than")
PRIMITIVE_SHAPES = ("cuboid", "cylinder")
PARAM_KINDS = ("float", "int", "bool")
UNITS = ("meter", "radian", "count", "flag")
_DEFAULT_UNIT = {"float": "meter", "int": "count", "bool": "flag"}

NODE_KINDS = ("input", "math", "switch", "combine", "primitive", "transform",
              "mesh_line", "points_on_instances", "join", "output")

# categories a socket can carry
SCALAR, VEC3, BOOL, MESH, POINTS = "scalar", "vec3", "bool", "mesh", "points"


class GraphError(ValueError):
    """Validation failure; carries every diagnostic found, not just the first."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("invalid shape program:\n" +
                         "\n".join(f"  - {d}" for d in self.diagnostics))


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str                                  # float | int | bool
    default: float | int | bool
    range: tuple[float, float] | None = None   # None only for bool
    unit: str = "meter"


@dataclass(frozen=True)
class Ref:
    node: int
    socket: int


@dataclass(frozen=True)
class Const:
    value: object


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)


@dataclass
class NodeMeta:
    out_category: str | None
    needs_float: bool
    discrete_deps: tuple[str, ...]

    @property
    def cacheable(self) -> bool:
        return not self.needs_float


@dataclass
class ShapeGraph:
    name: str
    parameters: tuple[ParameterSpec, ...]
    nodes: tuple[Node, ...]
    topo: tuple[int, ...]
    meta: dict[int, NodeMeta]
    output_id: int
    input_id: int | None

    def node(self, nid: int) -> Node:
        return self._by_id[nid]

    def __post_init__(self):
        self._by_id = {n.id: n for n in self.nodes}
        self._params = {p.name: p for p in self.parameters}

    def param(self, name: str) -> ParameterSpec:
        return self._params[name]

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    def continuous_params(self) -> list[ParameterSpec]:
        return [p for p in self.parameters if p.kind == "float"]

    def discrete_params(self) -> list[ParameterSpec]:
        return [p for p in self.parameters if p.kind != "float"]


@dataclass
class ParameterAssignment:
    """Full input to one evaluation: shape parameters plus object pose."""
    values: dict[str, float | int | bool]
    rotation: float = 0.0                      # about the up axis, radians
    translation: np.ndarray = None

    def __post_init__(self):
        if self.translation is None:
            self.translation = np.zeros(3)
        else:
            self.translation = np.asarray(self.translation, dtype=float)

    def copy(self) -> "ParameterAssignment":
        return ParameterAssignment(dict(self.values), self.rotation,
                                   self.translation.copy())


def default_assignment(graph: ShapeGraph) -> ParameterAssignment:
    return ParameterAssignment({p.name: p.default for p in graph.parameters})


def validate_assignment(graph: ShapeGraph, a: ParameterAssignment) -> None:
    problems = []
    for p in graph.parameters:
        if p.name not in a.values:
            problems.append(f"missing value for parameter {p.name!r}")
            continue
        v = a.values[p.name]
        if p.kind == "float":
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                problems.append(f"{p.name!r}: expected a number, got {v!r}")
            elif not (p.range[0] <= float(v) <= p.range[1]):
                problems.append(f"{p.name!r}: {v} outside range {list(p.range)}")
        elif p.kind == "int":
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                problems.append(f"{p.name!r}: expected an int, got {v!r}")
            elif not (p.range[0] <= int(v) <= p.range[1]):
                problems.append(f"{p.name!r}: {v} outside range {list(p.range)}")
        else:
            if not isinstance(v, (bool, np.bool_)):
                problems.append(f"{p.name!r}: expected a bool, got {v!r}")
    for name in a.values:
        if name not in {p.name for p in graph.parameters}:
            problems.append(f"unknown parameter {name!r}")
    if not math.isfinite(a.rotation):
        problems.append(f"rotation is not finite: {a.rotation!r}")
    if not np.isfinite(a.translation).all():
        problems.append(f"translation is not finite: {a.translation!r}")
    if problems:
        raise GraphError(problems)


# parsing ---------------------------------------------------------------------

def parse_graph(text: str | bytes) -> ShapeGraph:
    """Parse and validate wire-format JSON; raises GraphError on any defect."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError([f"not valid JSON: {e}"]) from None
    return graph_from_dict(data)


def load_graph(path) -> ShapeGraph:
    with open(path, "rb") as fh:
        return parse_graph(fh.read())


def bundled_graph_names() -> list[str]:
    pkg = resources.files("geonode") / "data"
    return sorted(p.name[:-len(".geonodes.json")]
                  for p in pkg.iterdir() if p.name.endswith(".geonodes.json"))


def load_bundled(name: str) -> ShapeGraph:
    pkg = resources.files("geonode") / "data"
    f = pkg / f"{name}.geonodes.json"
    return parse_graph(f.read_bytes())


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _parse_params(raw, diags: list[str]) -> list[ParameterSpec]:
    specs = []
    seen = set()
    for i, p in enumerate(raw):
        where = f"parameters[{i}]"
        if not isinstance(p, dict):
            diags.append(f"{where}: expected an object, got {type(p).__name__}")
            continue
        name = p.get("name")
        if not isinstance(name, str) or not name:
            diags.append(f"{where}: missing or empty name")
            continue
        where = f"parameter {name!r}"
        if name in seen:
            diags.append(f"{where}: duplicate name")
            continue
        seen.add(name)
        kind = p.get("kind")
        if kind not in PARAM_KINDS:
            diags.append(f"{where}: kind must be one of {list(PARAM_KINDS)}, got {kind!r}")
            continue
        unit = p.get("unit", _DEFAULT_UNIT[kind])
        if unit not in UNITS:
            diags.append(f"{where}: unknown unit {unit!r}")
            continue
        extra = set(p) - {"name", "kind", "unit", "range", "default"}
        if extra:
            diags.append(f"{where}: unknown fields {sorted(extra)}")
            continue
        rng = p.get("range")
        default = p.get("default")
        if kind == "bool":
            if rng is not None:
                diags.append(f"{where}: bool parameters take no range")
                continue
            if not isinstance(default, bool):
                diags.append(f"{where}: default must be true or false, got {default!r}")
                continue
            specs.append(ParameterSpec(name, kind, default, None, unit))
            continue
        if (not isinstance(rng, list) or len(rng) != 2
                or not all(_is_num(v) for v in rng)):
            diags.append(f"{where}: range must be [lo, hi], got {rng!r}")
            continue
        lo, hi = rng
        if kind == "float":
            if not (lo < hi):
                diags.append(f"{where}: float range needs lo < hi, got {rng}")
                continue
            if not _is_num(default):
                diags.append(f"{where}: default must be a number, got {default!r}")
                continue
            if not (lo <= default <= hi):
                diags.append(f"{where}: default {default} outside range {rng}")
                continue
            specs.append(ParameterSpec(name, kind, float(default),
                                       (float(lo), float(hi)), unit))
        else:
            if not (isinstance(lo, int) and isinstance(hi, int) and lo <= hi):
                diags.append(f"{where}: int range needs integer lo <= hi, got {rng}")
                continue
            if not isinstance(default, int) or isinstance(default, bool):
                diags.append(f"{where}: default must be an int, got {default!r}")
                continue
            if not (lo <= default <= hi):
                diags.append(f"{where}: default {default} outside range {rng}")
                continue
            specs.append(ParameterSpec(name, kind, default, (lo, hi), unit))
    return specs


def _parse_input_ref(raw, diags, where):
    if isinstance(raw, dict):
        if set(raw) != {"const"}:
            diags.append(f"{where}: literal object must be {{\"const\": ...}}, got {raw!r}")
            return None
        return Const(raw["const"])
    if (isinstance(raw, list) and len(raw) == 2 and isinstance(raw[0], int)
            and isinstance(raw[1], int) and not isinstance(raw[0], bool)
            and not isinstance(raw[1], bool)):
        return Ref(raw[0], raw[1])
    diags.append(f"{where}: input must be [node_id, socket] or {{\"const\": ...}}, got {raw!r}")
    return None


def _parse_nodes(raw, diags: list[str]) -> list[Node]:
    nodes = []
    seen_ids = set()
    for i, n in enumerate(raw):
        where = f"nodes[{i}]"
        if not isinstance(n, dict):
            diags.append(f"{where}: expected an object, got {type(n).__name__}")
            continue
        nid = n.get("id")
        if not isinstance(nid, int) or isinstance(nid, bool):
            diags.append(f"{where}: missing integer id")
            continue
        where = f"node {nid}"
        if nid in seen_ids:
            diags.append(f"{where}: duplicate id")
            continue
        seen_ids.add(nid)
        kind = n.get("kind")
        if kind not in NODE_KINDS:
            diags.append(f"{where}: unknown kind {kind!r}")
            continue
        extra = set(n) - {"id", "kind", "attrs", "inputs"}
        if extra:
            diags.append(f"{where}: unknown fields {sorted(extra)}")
            continue
        attrs = n.get("attrs", {})
        if not isinstance(attrs, dict):
            diags.append(f"{where}: attrs must be an object")
            continue
        raw_inputs = n.get("inputs")
        if not isinstance(raw_inputs, list):
            diags.append(f"{where}: missing inputs list")
            continue
        inputs = []
        bad = False
        for j, ri in enumerate(raw_inputs):
            parsed = _parse_input_ref(ri, diags, f"{where} input {j}")
            if parsed is None:
                bad = True
            else:
                inputs.append(parsed)
        if bad:
            continue
        nodes.append(Node(nid, kind, tuple(inputs), dict(attrs)))
    return nodes


# per-kind socket contracts ---------------------------------------------------

def _node_arity_ok(node: Node, diags: list[str]) -> bool:
    k = node.kind
    n = len(node.inputs)
    where = f"node {node.id} ({k})"
    fixed = {"input": 0, "math": 2, "switch": 3, "combine": 3, "transform": 4,
             "mesh_line": 3, "points_on_instances": 2, "output": 1}
    if k in fixed and n != fixed[k]:
        diags.append(f"{where}: expects {fixed[k]} inputs, got {n}")
        return False
    allowed_attrs = {"math": {"op"}, "primitive": {"shape", "segments"}}
    extra = set(node.attrs) - allowed_attrs.get(k, set())
    if extra:
        diags.append(f"{where}: unknown attrs {sorted(extra)}")
        return False
    if k == "math":
        op = node.attrs.get("op")
        if op not in MATH_OPS:
            diags.append(f"{where}: op must be one of {list(MATH_OPS)}, got {op!r}")
            return False
    if k == "primitive":
        shape = node.attrs.get("shape")
        if shape not in PRIMITIVE_SHAPES:
            diags.append(f"{where}: shape must be one of {list(PRIMITIVE_SHAPES)}, "
                         f"got {shape!r}")
            return False
        if shape == "cuboid":
            if n != 1:
                diags.append(f"{where}: cuboid expects 1 input (size), got {n}")
                return False
            if "segments" in node.attrs:
                diags.append(f"{where}: cuboid takes no segments attr")
                return False
        else:
            if n != 2:
                diags.append(f"{where}: cylinder expects 2 inputs (radius, depth), got {n}")
                return False
            seg = node.attrs.get("segments")
            if not isinstance(seg, int) or isinstance(seg, bool) or seg < 3:
                diags.append(f"{where}: cylinder segments must be an int >= 3, got {seg!r}")
                return False
    return True


def _const_category(value, want: str) -> bool:
    if want == SCALAR:
        return _is_num(value)
    if want == BOOL:
        return isinstance(value, bool)
    if want == VEC3:
        return (isinstance(value, list) and len(value) == 3
                and all(_is_num(v) for v in value))
    return False  # no geometry literals


def _expected_inputs(node: Node) -> list[str]:
    k = node.kind
    if k == "math":
        return [SCALAR, SCALAR]
    if k == "combine":
        return [SCALAR, SCALAR, SCALAR]
    if k == "transform":
        return [MESH, VEC3, VEC3, VEC3]
    if k == "mesh_line":
        return [SCALAR, VEC3, VEC3]          # count, start, offset
    if k == "points_on_instances":
        return [POINTS, MESH]
    if k == "output":
        return [MESH]
    if k == "primitive":
        if node.attrs.get("shape") == "cuboid":
            return [VEC3]
        return [SCALAR, SCALAR]              # radius, depth
    if k == "join":
        return [MESH] * len(node.inputs)
    return []  # input, switch handled separately


def graph_from_dict(data) -> ShapeGraph:
    diags: list[str] = []
    if not isinstance(data, dict):
        raise GraphError([f"top level must be an object, got {type(data).__name__}"])
    name = data.get("name")
    if not isinstance(name, str) or not name:
        diags.append("missing graph name")
        name = "?"
    version = data.get("version")
    if version != WIRE_VERSION:
        diags.append(f"unsupported wire version {version!r} (expected {WIRE_VERSION!r})")
    extra = set(data) - {"name", "version", "parameters", "nodes"}
    if extra:
        diags.append(f"unknown top-level fields {sorted(extra)}")
    raw_params = data.get("parameters")
    if not isinstance(raw_params, list):
        diags.append("parameters must be a list")
        raw_params = []
    raw_nodes = data.get("nodes")
    if not isinstance(raw_nodes, list):
        diags.append("nodes must be a list")
        raw_nodes = []

    params = _parse_params(raw_params, diags)
    nodes = _parse_nodes(raw_nodes, diags)
    by_id = {n.id: n for n in nodes}

    # structural checks that do not need an ordering
    inputs_nodes = [n for n in nodes if n.kind == "input"]
    outputs = [n for n in nodes if n.kind == "output"]
    if len(inputs_nodes) > 1:
        diags.append(f"more than one input node: {sorted(n.id for n in inputs_nodes)}")
    if len(outputs) != 1:
        diags.append(f"need exactly one output node, found {len(outputs)}")

    ok_nodes = [n for n in nodes if _node_arity_ok(n, diags)]

    refs_ok = True
    for n in ok_nodes:
        for j, src in enumerate(n.inputs):
            if not isinstance(src, Ref):
                continue
            where = f"node {n.id} input {j}"
            if src.node not in by_id:
                diags.append(f"{where}: references missing node {src.node}")
                refs_ok = False
                continue
            s = by_id[src.node]
            if s.kind == "output":
                diags.append(f"{where}: output node has no output sockets")
                refs_ok = False
            elif s.kind == "input":
                if not (0 <= src.socket < len(params)):
                    diags.append(f"{where}: input socket {src.socket} out of range "
                                 f"(graph has {len(params)} parameters)")
                    refs_ok = False
            elif src.socket != 0:
                diags.append(f"{where}: node {s.id} has a single output socket 0")
                refs_ok = False

    if diags and (not refs_ok or not outputs or len(outputs) > 1
                  or len(ok_nodes) != len(nodes)):
        raise GraphError(diags)

    # ordering: Kahn with a min-heap so equal-depth nodes come out by id
    import heapq
    indeg = {n.id: 0 for n in nodes}
    consumers: dict[int, list[int]] = {n.id: [] for n in nodes}
    for n in nodes:
        srcs = {src.node for src in n.inputs if isinstance(src, Ref)}
        indeg[n.id] = len(srcs)
        for s in srcs:
            consumers[s].append(n.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    topo: list[int] = []
    while ready:
        nid = heapq.heappop(ready)
        topo.append(nid)
        for c in consumers[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(topo) != len(nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        diags.append(f"cycle detected among nodes {stuck}")
        raise GraphError(diags)

    # category propagation
    cats: dict[int, str] = {}
    param_cat = [SCALAR if p.kind in ("float", "int") else BOOL for p in params]

    def src_category(src, want, where) -> str | None:
        if isinstance(src, Const):
            if not _const_category(src.value, want):
                diags.append(f"{where}: literal {src.value!r} is not valid for a "
                             f"{want} socket")
            return want
        s = by_id[src.node]
        if s.kind == "input":
            return param_cat[src.socket]
        return cats.get(s.id)

    for nid in topo:
        n = by_id[nid]
        if n.kind == "input":
            continue
        if n.kind == "switch":
            where = f"node {nid} (switch)"
            c0 = src_category(n.inputs[0], BOOL, f"{where} input 0")
            if c0 is not None and c0 != BOOL:
                diags.append(f"{where}: condition must be bool, got {c0}")
            if isinstance(n.inputs[1], Const) or isinstance(n.inputs[2], Const):
                diags.append(f"{where}: branch literals are not supported; feed "
                             f"nodes into both branches")
                cats[nid] = MESH
                continue
            cf = src_category(n.inputs[1], None, f"{where} input 1")
            ct = src_category(n.inputs[2], None, f"{where} input 2")
            if cf is not None and ct is not None and cf != ct:
                diags.append(f"{where}: branches disagree ({cf} vs {ct})")
            cats[nid] = cf or ct or MESH
            continue
        want = _expected_inputs(n)
        for j, (src, w) in enumerate(zip(n.inputs, want)):
            got = src_category(src, w, f"node {nid} ({n.kind}) input {j}")
            if got is not None and got != w:
                # a mesh where points are required is the classic mistake
                diags.append(f"node {nid} ({n.kind}) input {j}: expected {w}, got {got}")
        cats[nid] = {"math": SCALAR, "combine": VEC3, "primitive": MESH,
                     "transform": MESH, "mesh_line": POINTS,
                     "points_on_instances": MESH, "join": MESH,
                     "output": MESH}[n.kind]
        if n.kind == "math" and n.attrs["op"] in ("greater_than", "less_than"):
            cats[nid] = BOOL

    # reachability from the output node
    out_id = outputs[0].id
    live = {out_id}
    stack = [out_id]
    while stack:
        n = by_id[stack.pop()]
        for src in n.inputs:
            if isinstance(src, Ref) and src.node not in live:
                live.add(src.node)
                stack.append(src.node)
    dead = sorted(set(by_id) - live)
    if dead:
        diags.append(f"dead nodes (never reach the output): {dead}")

    # every parameter must be consumed by a live node
    used = set()
    for n in nodes:
        if n.id not in live:
            continue
        for src in n.inputs:
            if isinstance(src, Ref) and by_id[src.node].kind == "input":
                used.add(src.socket)
    unused = [p.name for i, p in enumerate(params) if i not in used]
    if unused:
        diags.append(f"unused parameters: {unused}")

    if diags:
        raise GraphError(diags)

    # static analysis: which parameters can reach each node
    meta: dict[int, NodeMeta] = {}
    for nid in topo:
        n = by_id[nid]
        needs_float = False
        disc: set[str] = set()
        for src in n.inputs:
            if not isinstance(src, Ref):
                continue
            s = by_id[src.node]
            if s.kind == "input":
                p = params[src.socket]
                if p.kind == "float":
                    needs_float = True
                else:
                    disc.add(p.name)
            else:
                m = meta[s.id]
                needs_float |= m.needs_float
                disc.update(m.discrete_deps)
        meta[nid] = NodeMeta(cats.get(nid), needs_float, tuple(sorted(disc)))

    input_id = inputs_nodes[0].id if inputs_nodes else None
    return ShapeGraph(name=name, parameters=tuple(params), nodes=tuple(nodes),
                      topo=tuple(topo), meta=meta, output_id=out_id,
                      input_id=input_id)


# serialization ---------------------------------------------------------------

def graph_to_dict(graph: ShapeGraph) -> dict:
    def enc_input(src):
        if isinstance(src, Const):
            return {"const": src.value}
        return [src.node, src.socket]

    params = []
    for p in graph.parameters:
        d = {"name": p.name, "kind": p.kind, "unit": p.unit}
        if p.range is not None:
            d["range"] = list(p.range)
        d["default"] = p.default
        params.append(d)
    nodes = []
    for n in graph.nodes:
        d = {"id": n.id, "kind": n.kind}
        if n.attrs:
            d["attrs"] = dict(sorted(n.attrs.items()))
        d["inputs"] = [enc_input(s) for s in n.inputs]
        nodes.append(d)
    return {"name": graph.name, "version": WIRE_VERSION,
            "parameters": params, "nodes": nodes}


def serialize_graph(graph: ShapeGraph) -> str:
    """Canonical text form; parse(serialize(g)) is a fixed point."""
    return json.dumps(graph_to_dict(graph), indent=2) + "\n"
