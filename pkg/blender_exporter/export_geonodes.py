"""Dump a Geometry Nodes tree to the .geonodes.json wire format.

Runs inside Blender's embedded interpreter:

    blender --background shapes.blend --python export_geonodes.py -- \
        --tree CabinetProgram --out cabinet.geonodes.json \
        [--ranges ranges.json] [--report report.json] [--validate]

The script walks the named node tree, maps every supported node to its wire
equivalent, and writes JSON that the `geonode` package loads directly.
Group inputs become named parameters; their ranges come from socket min/max
metadata when Blender has real bounds, otherwise from the sidecar ranges
file (an unbounded parameter is refused, never silently widened).

Unsupported nodes do not abort the export: they are recorded in a
machine-readable skip list, their consumers are rewired to a zero constant,
and the report is marked partial. One level of node-group nesting is
flattened inline; deeper nesting is rejected.
"""

import argparse
import json
import subprocess
import sys

WIRE_VERSION = "1"
INPUT_ID = 1

# wire contract: the op and node vocabulary the geonode parser accepts
MATH_OPS = ("add", "subtract", "multiply", "divide", "greater_than",
            "less_than")

NODE_MAP = {
    "ShaderNodeMath": "math",
    "GeometryNodeSwitch": "switch",
    "ShaderNodeCombineXYZ": "combine",
    "GeometryNodeMeshCube": "primitive",
    "GeometryNodeMeshCylinder": "primitive",
    "GeometryNodeTransform": "transform",
    "GeometryNodeMeshLine": "mesh_line",
    "GeometryNodeInstanceOnPoints": "points_on_instances",
    "GeometryNodeJoinGeometry": "join",
}

PASSTHROUGH = ("NodeGroupInput", "NodeGroupOutput", "NodeReroute", "NodeFrame")

# socket bounds at or beyond this magnitude are treated as "no metadata";
# Blender uses huge soft limits when the author never set any
BOUND_LIMIT = 1e6


class ExportError(RuntimeError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("export failed:\n" + "\n".join(
            f"  - {d}" for d in self.diagnostics))


def _bpy():
    import bpy
    return bpy


def _socket_kind(type_name: str) -> str | None:
    t = type_name or ""
    if "Float" in t:
        return "float"
    if "Int" in t:
        return "int"
    if "Bool" in t:
        return "bool"
    if "Geometry" in t:
        return "geometry"
    return None


def _interface_inputs(tree):
    """Group-input declarations, newest API first, oldest as fallback."""
    iface = getattr(tree, "interface", None)
    if iface is not None:
        return [it for it in iface.items_tree
                if getattr(it, "item_type", "SOCKET") == "SOCKET"
                and it.in_out == "INPUT"]
    return list(tree.inputs)


def _iface_type(item) -> str | None:
    name = getattr(item, "socket_type", None) or \
        getattr(item, "bl_socket_idname", "")
    return _socket_kind(name)


def _finite_bound(item, attr):
    v = getattr(item, attr, None)
    if v is None:
        return None
    v = float(v)
    if abs(v) >= BOUND_LIMIT or v != v:
        return None
    return v


def _build_parameters(tree, sidecar_ranges):
    """Parameter table plus interface-index -> wire-socket map."""
    params = []
    index_map = {}
    problems = []
    for i, item in enumerate(_interface_inputs(tree)):
        kind = _iface_type(item)
        if kind == "geometry":
            problems.append(
                f"group input {item.name!r} takes geometry; shape programs "
                f"are closed, remove the socket")
            continue
        if kind is None:
            problems.append(f"group input {item.name!r}: unsupported socket "
                            f"type")
            continue
        entry = {"name": item.name, "kind": kind}
        if kind == "bool":
            entry["unit"] = "flag"
            entry["default"] = bool(getattr(item, "default_value", False))
        else:
            subtype = str(getattr(item, "subtype", "") or "")
            entry["unit"] = "radian" if subtype.upper() == "ANGLE" else (
                "meter" if kind == "float" else "count")
            lo = _finite_bound(item, "min_value")
            hi = _finite_bound(item, "max_value")
            if lo is None or hi is None:
                rng = sidecar_ranges.get(item.name)
                if rng is None:
                    problems.append(
                        f"parameter {item.name!r}: socket has no usable "
                        f"min/max and the ranges sidecar does not list it")
                    continue
                lo, hi = float(rng[0]), float(rng[1])
            if kind == "int":
                entry["range"] = [int(lo), int(hi)]
                entry["default"] = int(getattr(item, "default_value", lo))
            else:
                entry["range"] = [lo, hi]
                entry["default"] = float(getattr(item, "default_value", lo))
        index_map[i] = len(params)
        params.append(entry)
    if problems:
        raise ExportError(problems)
    return params, index_map


def _const(value):
    if isinstance(value, bool):
        return {"const": value}
    if isinstance(value, (int, float)):
        return {"const": value}
    try:
        seq = [float(v) for v in value]
    except TypeError:
        raise ExportError([f"cannot encode socket default {value!r}"])
    if len(seq) != 3:
        raise ExportError([f"expected a 3-vector default, got {seq!r}"])
    return {"const": seq}


def _enabled_input(node, name):
    for s in node.inputs:
        if s.name == name and getattr(s, "enabled", True):
            return s
    return None


def _need(node, name):
    s = _enabled_input(node, name)
    if s is None:
        raise ExportError([f"node {node.name!r}: no enabled input socket "
                           f"named {name!r}"])
    return s


def _output_index(node, socket):
    for i, s in enumerate(node.outputs):
        if s is socket:
            return i
    raise ExportError([f"link source socket not found on {node.name!r}"])


class _TreeExporter:
    def __init__(self, tree, sidecar_ranges):
        self.tree = tree
        self.params, self.index_map = _build_parameters(tree, sidecar_ranges)
        self.ids = {}              # id(node) -> wire id
        self.names = {}            # wire id -> (node name, node type)
        self.emit_queue = []       # (node, env)
        self.group_envs = {}       # id(group node) -> env for its inner tree
        self.skipped = []
        self.next_id = INPUT_ID + 1

    # -- phase A: walk trees, allocate ids ---------------------------------

    def collect(self, tree, env, depth):
        for node in tree.nodes:
            t = node.bl_idname
            if t in PASSTHROUGH:
                continue
            if t == "GeometryNodeGroup":
                if depth >= 1:
                    raise ExportError(
                        [f"node {node.name!r}: groups nested deeper than one "
                         f"level are not supported, flatten the inner group"])
                inner_env = {"group": node, "outer": env}
                self.group_envs[id(node)] = inner_env
                self.collect(node.node_tree, inner_env, depth + 1)
                continue
            if t not in NODE_MAP:
                self.skip(node, "unsupported node type")
                continue
            if getattr(node, "mute", False):
                self.skip(node, "muted node")
                continue
            if t == "ShaderNodeMath" and \
                    str(node.operation).lower() not in MATH_OPS:
                self.skip(node, f"math op {str(node.operation).lower()!r} "
                                f"is outside the wire vocabulary")
                continue
            if t == "GeometryNodeMeshCylinder":
                verts = _enabled_input(node, "Vertices")
                if verts is not None and verts.is_linked:
                    self.skip(node, "cylinder vertex count must be constant")
                    continue
            self.ids[id(node)] = self.next_id
            self.names[self.next_id] = (node.name, node.bl_idname)
            self.next_id += 1
            self.emit_queue.append((node, env))

    def skip(self, node, reason):
        self.skipped.append({"node": node.name, "type": node.bl_idname,
                             "reason": reason})

    # -- phase B: resolve links and emit wire nodes -------------------------

    def ref(self, in_socket, env):
        if not in_socket.is_linked:
            return _const(in_socket.default_value)
        link = in_socket.links[0]
        src, sock = link.from_node, link.from_socket
        while src.bl_idname == "NodeReroute":
            inner = src.inputs[0]
            if not inner.is_linked:
                return _const(in_socket.default_value)
            link = inner.links[0]
            src, sock = link.from_node, link.from_socket
        if src.bl_idname == "NodeGroupInput":
            idx = _output_index(src, sock)
            if env is not None:
                # inside a flattened group: the group node's own input
                # socket supplies the value
                outer_socket = env["group"].inputs[idx]
                return self.ref(outer_socket, env["outer"])
            if idx not in self.index_map:
                raise ExportError(
                    [f"link from unsupported group input socket index {idx}"])
            return [INPUT_ID, self.index_map[idx]]
        if src.bl_idname == "GeometryNodeGroup":
            inner_env = self.group_envs[id(src)]
            out = self.find_group_output(src.node_tree, src.name)
            return self.ref(out.inputs[0], inner_env)
        if id(src) not in self.ids:
            self.skip_consumer_note(src)
            return {"const": 0}
        return [self.ids[id(src)], 0]

    def skip_consumer_note(self, src):
        for entry in self.skipped:
            if entry["node"] == src.name:
                entry["reason"] += "; downstream links patched"
                return

    def find_group_output(self, tree, label):
        for node in tree.nodes:
            if node.bl_idname == "NodeGroupOutput":
                return node
        raise ExportError([f"tree {label!r} has no group output"])

    def emit(self, node, env):
        t = node.bl_idname
        kind = NODE_MAP[t]
        wire = {"id": self.ids[id(node)], "kind": kind}
        if t == "ShaderNodeMath":
            wire["attrs"] = {"op": str(node.operation).lower()}
            wire["inputs"] = [self.ref(node.inputs[0], env),
                              self.ref(node.inputs[1], env)]
        elif t == "GeometryNodeSwitch":
            wire["inputs"] = [
                self.ref(_need(node, "Switch"), env),
                self.ref(_need(node, "False"), env),
                self.ref(_need(node, "True"), env)]
        elif t == "ShaderNodeCombineXYZ":
            wire["inputs"] = [self.ref(node.inputs[i], env) for i in range(3)]
        elif t == "GeometryNodeMeshCube":
            wire["attrs"] = {"shape": "cuboid"}
            wire["inputs"] = [self.ref(_need(node, "Size"), env)]
        elif t == "GeometryNodeMeshCylinder":
            verts = _need(node, "Vertices")
            wire["attrs"] = {"shape": "cylinder",
                             "segments": int(verts.default_value)}
            wire["inputs"] = [self.ref(_need(node, "Radius"), env),
                              self.ref(_need(node, "Depth"), env)]
        elif t == "GeometryNodeTransform":
            wire["inputs"] = [
                self.ref(_need(node, "Geometry"), env),
                self.ref(_need(node, "Translation"), env),
                self.ref(_need(node, "Rotation"), env),
                self.ref(_need(node, "Scale"), env)]
        elif t == "GeometryNodeMeshLine":
            wire["inputs"] = [
                self.ref(_need(node, "Count"), env),
                self.ref(_need(node, "Start Location"), env),
                self.ref(_need(node, "Offset"), env)]
        elif t == "GeometryNodeInstanceOnPoints":
            wire["inputs"] = [
                self.ref(_need(node, "Points"), env),
                self.ref(_need(node, "Instance"), env)]
        elif t == "GeometryNodeJoinGeometry":
            sock = node.inputs[0]
            refs = []
            for link in sock.links:
                src, s = link.from_node, link.from_socket
                if id(src) in self.ids:
                    refs.append([self.ids[id(src)], 0])
                elif src.bl_idname == "GeometryNodeGroup":
                    inner_env = self.group_envs[id(src)]
                    out = self.find_group_output(src.node_tree, src.name)
                    refs.append(self.ref(out.inputs[0], inner_env))
                else:
                    self.skip_consumer_note(src)
            wire["inputs"] = refs
        return wire

    def run(self):
        out_node = None
        for node in self.tree.nodes:
            if node.bl_idname == "NodeGroupOutput":
                out_node = node
        if out_node is None:
            raise ExportError(["no group output"])
        self.collect(self.tree, None, 0)
        nodes = [{"id": INPUT_ID, "kind": "input", "inputs": []}]
        for node, env in self.emit_queue:
            nodes.append(self.emit(node, env))
        geo = out_node.inputs[0]
        if not geo.is_linked:
            raise ExportError(["group output has no incoming geometry link"])
        nodes.append({"id": self.next_id, "kind": "output",
                      "inputs": [self.ref(geo, None)]})
        return {"name": self.tree.name, "version": WIRE_VERSION,
                "parameters": self.params, "nodes": self.prune(nodes)}

    def prune(self, nodes):
        """Drop nodes orphaned by skips; a partial export should still be
        the most valid program we can emit."""
        by_id = {n["id"]: n for n in nodes}
        keep = {INPUT_ID}
        stack = [nodes[-1]["id"]]
        while stack:
            nid = stack.pop()
            if nid in keep:
                continue
            keep.add(nid)
            for ref in by_id[nid].get("inputs", []):
                if isinstance(ref, list):
                    stack.append(ref[0])
        for n in nodes:
            if n["id"] not in keep:
                name, type_name = self.names[n["id"]]
                self.skipped.append(
                    {"node": name, "type": type_name,
                     "reason": "orphaned by a skipped consumer, dropped"})
        return [n for n in nodes if n["id"] in keep]


def export_node_tree(tree_name, out_path, ranges_path=None):
    """Export one named tree; returns the report dict."""
    bpy = _bpy()
    if tree_name not in bpy.data.node_groups:
        have = sorted(t.name for t in bpy.data.node_groups)
        raise ExportError([f"tree {tree_name!r} not found; file has {have}"])
    sidecar = {}
    if ranges_path:
        with open(ranges_path) as fh:
            sidecar = json.load(fh)
    ex = _TreeExporter(bpy.data.node_groups[tree_name], sidecar)
    doc = ex.run()
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return {
        "tree": tree_name,
        "output": str(out_path),
        "nodes_exported": len(doc["nodes"]),
        "parameters": len(doc["parameters"]),
        "skipped": ex.skipped,
        "partial": bool(ex.skipped),
    }


def validate_with_geonode(path):
    """Ask the primary tool whether the exported file parses cleanly."""
    proc = subprocess.run(["geonode", "compile", str(path)],
                          capture_output=True, text=True)
    return {"ran": True, "ok": proc.returncode == 0,
            "output": (proc.stdout + proc.stderr).strip()}


def main(argv=None):
    if argv is None:
        argv = sys.argv
        argv = argv[argv.index("--") + 1:] if "--" in argv else argv[1:]
    ap = argparse.ArgumentParser(
        prog="export_geonodes",
        description="export a Geometry Nodes tree as .geonodes.json")
    ap.add_argument("--tree", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--ranges", help="sidecar JSON {parameter name: [lo, hi]}")
    ap.add_argument("--report", help="write the export report as JSON")
    ap.add_argument("--validate", action="store_true",
                    help="run 'geonode compile' on the result")
    args = ap.parse_args(argv)

    try:
        report = export_node_tree(args.tree, args.out, args.ranges)
    except ExportError as e:
        for d in e.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return 1
    if args.validate:
        report["validation"] = validate_with_geonode(args.out)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
    print(f"exported {report['nodes_exported']} nodes, "
          f"{report['parameters']} parameters -> {report['output']}")
    for entry in report["skipped"]:
        print(f"skipped {entry['node']} ({entry['type']}): {entry['reason']}")
    if args.validate:
        ok = report["validation"]["ok"]
        print("validation: " + ("clean" if ok else "FAILED"))
        if not ok:
            print(report["validation"]["output"])
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
