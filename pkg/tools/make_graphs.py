"""Generate the bundled shape-program graphs.

Builds each graph as a wire-format dict, validates it through the real
parser, prints a small census, and writes the canonical serialization into
src/geonode/data/.  Run from the repository root:

    python tools/make_graphs.py
"""
from __future__ import annotations

import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from geonode.evaluator import evaluate  # noqa: E402
from geonode.graph import default_assignment, graph_from_dict, serialize_graph  # noqa: E402

DATA = Path(__file__).resolve().parents[1] / "src" / "geonode" / "data"

ROT0 = {"const": [0.0, 0.0, 0.0]}
SCALE1 = {"const": [1.0, 1.0, 1.0]}


def C(v):
    return {"const": v}


class Builder:
    def __init__(self, name: str, params: list[dict]):
        self.name = name
        self.params = params
        self.nodes: list[dict] = []
        self._next = 1
        self.input_id = self.add("input", [])
        self._socket = {p["name"]: i for i, p in enumerate(params)}

    def add(self, kind: str, inputs: list, **attrs) -> int:
        nid = self._next
        self._next += 1
        node = {"id": nid, "kind": kind, "inputs": inputs}
        if attrs:
            node["attrs"] = attrs
        self.nodes.append(node)
        return nid

    def P(self, name: str) -> list:
        return [self.input_id, self._socket[name]]

    def math(self, op: str, a, b) -> list:
        return [self.add("math", [a, b], op=op), 0]

    def add_(self, a, b):  # noqa: A003 - mirrors the node op name
        return self.math("add", a, b)

    def sub(self, a, b):
        return self.math("subtract", a, b)

    def mul(self, a, b):
        return self.math("multiply", a, b)

    def div(self, a, b):
        return self.math("divide", a, b)

    def combine(self, x, y, z) -> list:
        return [self.add("combine", [x, y, z]), 0]

    def cuboid(self, size) -> list:
        return [self.add("primitive", [size], shape="cuboid"), 0]

    def cylinder(self, radius, depth, segments: int) -> list:
        return [self.add("primitive", [radius, depth],
                         shape="cylinder", segments=segments), 0]

    def transform(self, mesh, translation, rotation=ROT0, scale=SCALE1) -> list:
        return [self.add("transform", [mesh, translation, rotation, scale]), 0]

    def mesh_line(self, count, start, offset) -> list:
        return [self.add("mesh_line", [count, start, offset]), 0]

    def instance(self, points, mesh) -> list:
        return [self.add("points_on_instances", [points, mesh]), 0]

    def join(self, *parts) -> list:
        return [self.add("join", list(parts)), 0]

    def switch(self, cond, off, on) -> list:
        return [self.add("switch", [cond, off, on]), 0]

    def output(self, mesh) -> None:
        self.add("output", [mesh])

    def to_dict(self) -> dict:
        return {"name": self.name, "version": "1",
                "parameters": self.params, "nodes": self.nodes}


def fparam(name, lo, hi, default):
    return {"name": name, "kind": "float", "unit": "meter",
            "range": [lo, hi], "default": default}


def make_divboards() -> dict:
    """The dividing-boards module: a row of vertical boards spanning the
    width, resting on the floor plane."""
    b = Builder("cabinet_divboards", [
        fparam("Width", 0.2, 1.0, 0.5),
        fparam("Dividing Board Thickness", 0.01, 0.08, 0.04),
        fparam("Height", 0.2, 1.0, 0.6),
        {"name": "Number of Dividing Boards", "kind": "int", "unit": "count",
         "range": [2, 8], "default": 5},
        fparam("Board Thickness", 0.01, 0.08, 0.04),
    ])
    span = b.sub(b.P("Width"), b.P("Dividing Board Thickness"))
    step = b.div(span, b.sub(b.P("Number of Dividing Boards"), C(1)))
    line = b.mesh_line(
        b.P("Number of Dividing Boards"),
        b.combine(b.mul(span, C(-0.5)), b.mul(b.P("Height"), C(0.5)), C(0)),
        b.combine(step, C(0), C(0)))
    board = b.cuboid(b.combine(b.P("Dividing Board Thickness"),
                               b.P("Height"), b.P("Board Thickness")))
    b.output(b.join(b.instance(line, board)))
    return b.to_dict()


def make_cabinet() -> dict:
    """Cabinet: panel shell, dividing boards, optional back, legs, and a
    fixed-size drawer stack."""
    b = Builder("cabinet", [
        fparam("Width", 0.4, 1.2, 0.8),
        fparam("Height", 0.5, 1.5, 1.0),
        fparam("Depth", 0.25, 0.6, 0.35),
        fparam("Board Thickness", 0.012, 0.05, 0.02),
        fparam("Leg Width", 0.02, 0.09, 0.04),
        fparam("Leg Height", 0.04, 0.25, 0.1),
        fparam("Leg Depth", 0.02, 0.09, 0.04),
        fparam("Dividing Board Thickness", 0.01, 0.04, 0.015),
        {"name": "Has Back", "kind": "bool", "unit": "flag", "default": True},
        {"name": "Has Legs", "kind": "bool", "unit": "flag", "default": True},
        {"name": "Has Drawers", "kind": "bool", "unit": "flag",
         "default": True},
        {"name": "Number of Dividing Boards", "kind": "int", "unit": "count",
         "range": [2, 6], "default": 3},
    ])
    W, H, D = b.P("Width"), b.P("Height"), b.P("Depth")
    BT = b.P("Board Thickness")

    zero = b.mul(W, C(0))
    lift = b.switch(b.P("Has Legs"), zero, b.P("Leg Height"))
    half_bt = b.mul(BT, C(0.5))
    yc = b.add_(lift, b.mul(H, C(0.5)))          # vertical body center
    h_in = b.sub(H, b.mul(BT, C(2)))             # clear height between panels
    w_in = b.sub(W, b.mul(BT, C(2)))

    panel_wd = b.cuboid(b.combine(W, BT, D))     # top and bottom share a size
    bottom = b.transform(panel_wd,
                         b.combine(C(0), b.add_(lift, half_bt), C(0)))
    top = b.transform(panel_wd,
                      b.combine(C(0), b.add_(lift, b.sub(H, half_bt)), C(0)))
    side = b.cuboid(b.combine(BT, h_in, D))
    half_span_x = b.mul(b.sub(W, BT), C(0.5))
    left = b.transform(side, b.combine(b.mul(b.sub(W, BT), C(-0.5)), yc, C(0)))
    right = b.transform(side, b.combine(half_span_x, yc, C(0)))

    back = b.transform(
        b.cuboid(b.combine(w_in, h_in, BT)),
        b.combine(C(0), yc, b.mul(b.sub(D, BT), C(-0.5))))

    step = b.div(w_in, b.add_(b.P("Number of Dividing Boards"), C(1)))
    div_line = b.mesh_line(
        b.P("Number of Dividing Boards"),
        b.combine(b.sub(step, b.mul(w_in, C(0.5))), yc, b.mul(D, C(-0.25))),
        b.combine(step, C(0), C(0)))
    div_board = b.cuboid(b.combine(b.P("Dividing Board Thickness"), h_in,
                                   b.mul(D, C(0.5))))
    divs = b.instance(div_line, div_board)

    leg = b.cuboid(b.combine(b.P("Leg Width"), b.P("Leg Height"),
                             b.P("Leg Depth")))
    leg_span_x = b.sub(W, b.P("Leg Width"))
    leg_x0 = b.mul(leg_span_x, C(-0.5))
    leg_y = b.mul(b.P("Leg Height"), C(0.5))
    leg_z = b.mul(b.sub(D, b.P("Leg Depth")), C(0.5))
    leg_row = b.combine(leg_span_x, C(0), C(0))
    legs = b.join(
        b.instance(b.mesh_line(C(2), b.combine(leg_x0, leg_y, leg_z),
                               leg_row), leg),
        b.instance(b.mesh_line(C(2),
                               b.combine(leg_x0, leg_y,
                                         b.mul(b.sub(D, b.P("Leg Depth")),
                                               C(-0.5))),
                               leg_row), leg))

    # Drawer: a constant-size unit built panel by panel, plus a turned
    # knob.  Nothing in the subassembly touches a continuous parameter,
    # so every board caches across evaluations.
    dw, dh, dd = 0.28, 0.12, 0.2
    pt = 0.012                            # drawer panel thickness
    d_bottom = b.transform(b.cuboid(C([dw, pt, dd])),
                           C([0.0, 0.5 * pt, 0.0]))
    d_front = b.transform(b.cuboid(C([dw, dh, pt])),
                          C([0.0, 0.5 * dh, 0.5 * (dd - pt)]))
    d_back = b.transform(b.cuboid(C([dw, dh, pt])),
                         C([0.0, 0.5 * dh, -0.5 * (dd - pt)]))
    d_side = b.cuboid(C([pt, dh, dd - 2 * pt]))
    d_left = b.transform(d_side, C([-0.5 * (dw - pt), 0.5 * dh, 0.0]))
    d_right = b.transform(d_side, C([0.5 * (dw - pt), 0.5 * dh, 0.0]))
    shaft = b.transform(b.cylinder(C(0.006), C(0.02), segments=8),
                        C([0.0, 0.5 * dh, 0.5 * dd + 0.01]),
                        C([0.5 * math.pi, 0.0, 0.0]))
    cap = b.transform(b.cylinder(C(0.014), C(0.012), segments=8),
                      C([0.0, 0.5 * dh, 0.5 * dd + 0.026]),
                      C([0.5 * math.pi, 0.0, 0.0]))
    unit = b.join(d_bottom, d_front, d_back, d_left, d_right, shaft, cap)
    drawers = b.transform(
        unit,
        b.combine(C(0), b.add_(lift, b.add_(BT, C(0.01))),
                  b.mul(b.sub(D, C(dd)), C(0.5))))

    shell = b.join(bottom, top, left, right, divs)
    s_back = b.switch(b.P("Has Back"), shell, b.join(shell, back))
    s_legs = b.switch(b.P("Has Legs"), s_back, b.join(s_back, legs))
    s_draw = b.switch(b.P("Has Drawers"), s_legs, b.join(s_legs, drawers))
    b.output(s_draw)
    return b.to_dict()


def make_sofa() -> dict:
    """Sofa: seat box, backrest, instanced cushions, optional armrests and
    four constant cylinder legs."""
    b = Builder("sofa", [
        fparam("Width", 0.9, 2.2, 1.6),
        fparam("Depth", 0.55, 1.0, 0.8),
        fparam("Seat Height", 0.2, 0.45, 0.32),
        fparam("Back Height", 0.3, 0.8, 0.55),
        fparam("Back Thickness", 0.08, 0.2, 0.12),
        fparam("Armrest Width", 0.06, 0.22, 0.14),
        fparam("Armrest Height", 0.1, 0.35, 0.2),
        {"name": "Has Armrests", "kind": "bool", "unit": "flag",
         "default": True},
        {"name": "Has Legs", "kind": "bool", "unit": "flag", "default": True},
        {"name": "Number of Seat Cushions", "kind": "int", "unit": "count",
         "range": [1, 4], "default": 2},
    ])
    W, D = b.P("Width"), b.P("Depth")
    SH, BH, BKT = b.P("Seat Height"), b.P("Back Height"), b.P("Back Thickness")
    AW, AH = b.P("Armrest Width"), b.P("Armrest Height")
    N = b.P("Number of Seat Cushions")

    zero = b.mul(W, C(0))
    leg_h = b.add_(zero, C(0.07))
    lift = b.switch(b.P("Has Legs"), zero, leg_h)
    seat_top = b.add_(lift, SH)

    seat = b.transform(b.cuboid(b.combine(W, SH, D)),
                       b.combine(C(0), b.add_(lift, b.mul(SH, C(0.5))), C(0)))
    back = b.transform(
        b.cuboid(b.combine(W, BH, BKT)),
        b.combine(C(0), b.add_(seat_top, b.mul(BH, C(0.5))),
                  b.mul(b.sub(D, BKT), C(-0.5))))

    cushion_span = b.switch(b.P("Has Armrests"), W, b.sub(W, b.mul(AW, C(2))))
    per = b.div(cushion_span, N)
    cushion = b.cuboid(b.combine(b.mul(per, C(0.92)), C(0.08),
                                 b.mul(b.sub(D, BKT), C(0.9))))
    c_line = b.mesh_line(
        N,
        b.combine(b.sub(b.mul(per, C(0.5)), b.mul(cushion_span, C(0.5))),
                  b.add_(seat_top, C(0.04)), b.mul(BKT, C(0.5))),
        b.combine(per, C(0), C(0)))
    cushions = b.instance(c_line, cushion)

    arm_h = b.add_(SH, AH)
    arm = b.cuboid(b.combine(AW, arm_h, D))
    arm_span = b.sub(W, AW)
    arms = b.instance(
        b.mesh_line(C(2),
                    b.combine(b.mul(arm_span, C(-0.5)),
                              b.add_(lift, b.mul(arm_h, C(0.5))), C(0)),
                    b.combine(arm_span, C(0), C(0))),
        arm)

    # Pedestal base: a fixed-footprint frame of four turned legs and two
    # rails.  It fits under the narrowest seat, and being all-constant it
    # caches as a unit across evaluations.
    leg = b.cylinder(C(0.02), C(0.07), segments=6)
    lx, lz, ly = 0.36, 0.21, 0.035
    fl = b.transform(leg, C([-lx, ly, lz]))
    fr = b.transform(leg, C([lx, ly, lz]))
    bl = b.transform(leg, C([-lx, ly, -lz]))
    br = b.transform(leg, C([lx, ly, -lz]))
    rail = b.cuboid(C([2 * lx + 0.04, 0.025, 0.035]))
    rail_f = b.transform(rail, C([0.0, 0.0575, lz]))
    rail_b = b.transform(rail, C([0.0, 0.0575, -lz]))
    legs = b.join(fl, fr, bl, br, rail_f, rail_b)

    base = b.join(seat, back, cushions)
    s_arms = b.switch(b.P("Has Armrests"), base, b.join(base, arms))
    s_legs = b.switch(b.P("Has Legs"), s_arms, b.join(s_arms, legs))
    b.output(s_legs)
    return b.to_dict()


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    for make in (make_divboards, make_cabinet, make_sofa):
        data = make()
        graph = graph_from_dict(data)          # raises on any diagnostic
        res = evaluate(graph, default_assignment(graph), differentiable=False)
        lo, hi = res.mesh.bbox()
        path = DATA / f"{graph.name}.geonodes.json"
        path.write_text(serialize_graph(graph))
        print(f"{graph.name}: {len(graph.nodes)} nodes, "
              f"{len(graph.parameters)} params, default mesh "
              f"{res.mesh.n_vertices}v/{res.mesh.n_faces}f, "
              f"bbox {np_fmt(hi - lo)} -> {path.name}")


def np_fmt(v) -> str:
    return "x".join(f"{x:.4g}" for x in v)


if __name__ == "__main__":
    main()
