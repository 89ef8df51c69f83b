"""Reverse-mode automatic differentiation on a write-once tape.

Two granularities share one tape.  Scalar arithmetic (parameter math inside
a shape program) records one entry per operation with partial derivatives
computed eagerly.  Bulk vertex work records block operations whose forward
values are plain numpy arrays and whose backward step applies a closed-form
vector-Jacobian product, so meshes never decompose into per-float entries.

Scalar entries only ever reference earlier scalar entries, and block
operations reference earlier blocks plus scalar slots.  Backward therefore
walks blocks in reverse first, accumulating into scalar adjoints, then
walks scalar entries in reverse.
"""
from __future__ import annotations

import math

import numpy as np

# scalar opcodes
_INPUT = 0
_ADD = 1
_ADDC = 2
_SUB = 3
_RSUBC = 4   # const - x
_MUL = 5
_MULC = 6
_DIV = 7
_RDIVC = 8   # const / x
_NEG = 9
_SIN = 10
_COS = 11
_MAXC = 12   # max(x, const)


class Value:
    """Handle to one scalar slot on a tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: Tape, i: int):
        self.tape = tape
        self.i = i

    @property
    def d(self) -> float:
        return self.tape.vals[self.i]

    def __repr__(self) -> str:
        return f"Value({self.d:.6g}@{self.i})"

    # arithmetic; constant folds keep the tape short and return the operand
    # itself for identities so downstream code sees the same slot
    def __add__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return t._emit(_ADD, self.i, other.i, 0.0, 1.0, 1.0, self.d + other.d)
        c = float(other)
        if c == 0.0:
            return self
        return t._emit(_ADDC, self.i, -1, c, 1.0, 0.0, self.d + c)

    __radd__ = __add__

    def __sub__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return t._emit(_SUB, self.i, other.i, 0.0, 1.0, -1.0, self.d - other.d)
        c = float(other)
        if c == 0.0:
            return self
        return t._emit(_ADDC, self.i, -1, -c, 1.0, 0.0, self.d - c)

    def __rsub__(self, other):
        c = float(other)
        return self.tape._emit(_RSUBC, self.i, -1, c, -1.0, 0.0, c - self.d)

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, Value):
            return t._emit(_MUL, self.i, other.i, 0.0, other.d, self.d, self.d * other.d)
        c = float(other)
        if c == 0.0:
            return 0.0
        if c == 1.0:
            return self
        return t._emit(_MULC, self.i, -1, c, c, 0.0, self.d * c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        if isinstance(other, Value):
            bd = other.d
            return t._emit(_DIV, self.i, other.i, 0.0, 1.0 / bd,
                           -self.d / (bd * bd), self.d / bd)
        c = float(other)
        if c == 1.0:
            return self
        return t._emit(_MULC, self.i, -1, 1.0 / c, 1.0 / c, 0.0, self.d / c)

    def __rtruediv__(self, other):
        c = float(other)
        ad = self.d
        return self.tape._emit(_RDIVC, self.i, -1, c, -c / (ad * ad), 0.0, c / ad)

    def __neg__(self):
        return self.tape._emit(_NEG, self.i, -1, 0.0, -1.0, 0.0, -self.d)


def value_of(x) -> float:
    """Current numeric value of a Value or plain number."""
    return x.d if isinstance(x, Value) else float(x)


def is_const(x) -> bool:
    return not isinstance(x, Value)


def sin(x):
    if isinstance(x, Value):
        return x.tape._emit(_SIN, x.i, -1, 0.0, math.cos(x.d), 0.0, math.sin(x.d))
    return math.sin(x)


def cos(x):
    if isinstance(x, Value):
        return x.tape._emit(_COS, x.i, -1, 0.0, -math.sin(x.d), 0.0, math.cos(x.d))
    return math.cos(x)


def clamp_min(x, lo: float):
    """max(x, lo) with subgradient 0 at the tie point."""
    if isinstance(x, Value):
        p = 1.0 if x.d > lo else 0.0
        return x.tape._emit(_MAXC, x.i, -1, lo, p, 0.0, max(x.d, lo))
    return max(float(x), lo)


def _resolve3(triple) -> tuple[np.ndarray, np.ndarray]:
    """Split three scalars into (values, tape slots); slot -1 marks a constant."""
    vals = np.empty(3)
    slots = np.full(3, -1, dtype=np.int64)
    for k, x in enumerate(triple):
        if isinstance(x, Value):
            vals[k] = x.d
            slots[k] = x.i
        else:
            vals[k] = float(x)
    return vals, slots


class _Gather:
    """Block whose rows are copies of scalar slots and constants."""

    __slots__ = ("out", "slots")

    def __init__(self, out: np.ndarray, slots: np.ndarray):
        self.out = out
        self.slots = slots  # same shape as out, -1 where constant

    def vjp(self, g, adj, badj):
        m = self.slots >= 0
        np.add.at(adj, self.slots[m], g[m])

    def recompute(self, tape: Tape) -> np.ndarray:
        out = self.out.copy()
        m = self.slots >= 0
        out[m] = np.asarray(tape.vals, dtype=float)[self.slots[m]]
        return out


class _Affine:
    """out = (src * scale) @ rot.T + trans, any factor optionally differentiable."""

    __slots__ = ("out", "src", "src_data", "rot", "rot_slots",
                 "scale", "scale_slots", "trans", "trans_slots")

    def __init__(self, out, src, src_data, rot, rot_slots, scale, scale_slots,
                 trans, trans_slots):
        self.out = out
        self.src = src              # block index of the input mesh, or None
        self.src_data = src_data    # (N, 3) input vertices as evaluated
        self.rot = rot              # (3, 3) float
        self.rot_slots = rot_slots  # (3, 3) int64, -1 const
        self.scale = scale
        self.scale_slots = scale_slots
        self.trans = trans
        self.trans_slots = trans_slots

    def vjp(self, g, adj, badj):
        vs = self.src_data * self.scale
        dvs = g @ self.rot
        if self.src is not None:
            badj[self.src] = badj.get(self.src, 0.0) + dvs * self.scale
        m = self.scale_slots >= 0
        if m.any():
            ds = (dvs * self.src_data).sum(axis=0)
            np.add.at(adj, self.scale_slots[m], ds[m])
        m = self.rot_slots >= 0
        if m.any():
            dr = g.T @ vs
            np.add.at(adj, self.rot_slots[m], dr[m])
        m = self.trans_slots >= 0
        if m.any():
            dt = g.sum(axis=0)
            np.add.at(adj, self.trans_slots[m], dt[m])

    def recompute(self, tape: Tape) -> np.ndarray:
        vals = np.asarray(tape.vals, dtype=float)

        def pick(base, slots):
            out = base.copy()
            m = slots >= 0
            out[m] = vals[slots[m]]
            return out

        src = self.src_data if self.src is None else tape.blocks[self.src].out
        return (src * pick(self.scale, self.scale_slots)) \
            @ pick(self.rot, self.rot_slots).T + pick(self.trans, self.trans_slots)


class _Instance:
    """out[a*T + t] = template[t] + anchors[a]."""

    __slots__ = ("out", "template", "template_data", "anchors", "anchors_data")

    def __init__(self, out, template, template_data, anchors, anchors_data):
        self.out = out
        self.template = template
        self.template_data = template_data
        self.anchors = anchors
        self.anchors_data = anchors_data

    def vjp(self, g, adj, badj):
        na = len(self.anchors_data)
        nt = len(self.template_data)
        g3 = g.reshape(na, nt, 3)
        if self.template is not None:
            badj[self.template] = badj.get(self.template, 0.0) + g3.sum(axis=0)
        if self.anchors is not None:
            badj[self.anchors] = badj.get(self.anchors, 0.0) + g3.sum(axis=1)

    def recompute(self, tape: Tape) -> np.ndarray:
        t = self.template_data if self.template is None else tape.blocks[self.template].out
        a = self.anchors_data if self.anchors is None else tape.blocks[self.anchors].out
        return (a[:, None, :] + t[None, :, :]).reshape(-1, 3)


class _Concat:
    """Vertical stack of parts; each part is (block index or None, data)."""

    __slots__ = ("out", "parts")

    def __init__(self, out, parts):
        self.out = out
        self.parts = parts

    def vjp(self, g, adj, badj):
        off = 0
        for ref, data in self.parts:
            n = len(data)
            if ref is not None:
                badj[ref] = badj.get(ref, 0.0) + g[off:off + n]
            off += n

    def recompute(self, tape: Tape) -> np.ndarray:
        rows = [data if ref is None else tape.blocks[ref].out
                for ref, data in self.parts]
        return np.vstack(rows) if rows else np.zeros((0, 3))


class Tape:
    """Write-once record of scalar entries and block operations."""

    def __init__(self):
        # parallel per-entry storage: (op, a, b, const, pa, pb) and values
        self.entries: list[tuple[int, int, int, float, float, float]] = []
        self.vals: list[float] = []
        self.inputs: dict[str, int] = {}
        self.blocks: list = []

    def __len__(self) -> int:
        return len(self.entries)

    def _emit(self, op, a, b, const, pa, pb, val) -> Value:
        i = len(self.entries)
        self.entries.append((op, a, b, const, pa, pb))
        self.vals.append(val)
        return Value(self, i)

    def input(self, name: str, value: float) -> Value:
        v = self._emit(_INPUT, -1, -1, float(value), 0.0, 0.0, float(value))
        self.inputs[name] = v.i
        return v

    # block recording -----------------------------------------------------

    def gather(self, rows) -> tuple[np.ndarray, int | None]:
        """Assemble (N, 3) vertices from per-coordinate scalars.

        rows is a sequence of (x, y, z) with Value or float coordinates.
        Returns the data and a block index, or None when every coordinate
        is constant (nothing to differentiate).
        """
        n = len(rows)
        data = np.empty((n, 3))
        slots = np.full((n, 3), -1, dtype=np.int64)
        any_var = False
        for r, row in enumerate(rows):
            for c in range(3):
                x = row[c]
                if isinstance(x, Value):
                    data[r, c] = x.d
                    slots[r, c] = x.i
                    any_var = True
                else:
                    data[r, c] = float(x)
        if not any_var:
            return data, None
        return data, self._push(_Gather(data, slots))

    def affine(self, src_data, src_ref, rot3, scale3, trans3) -> tuple[np.ndarray, int | None]:
        """Scale, rotate, translate an (N, 3) array.

        rot3 is a 3x3 nested sequence, scale3 and trans3 are 3-sequences;
        entries may be Values.  Scale applies first, then rotation, then
        translation.
        """
        rot = np.empty((3, 3))
        rot_slots = np.full((3, 3), -1, dtype=np.int64)
        for r in range(3):
            v, s = _resolve3(rot3[r])
            rot[r] = v
            rot_slots[r] = s
        scale, scale_slots = _resolve3(scale3)
        trans, trans_slots = _resolve3(trans3)
        out = (src_data * scale) @ rot.T + trans
        diff = (src_ref is not None or (rot_slots >= 0).any()
                or (scale_slots >= 0).any() or (trans_slots >= 0).any())
        if not diff:
            return out, None
        blk = _Affine(out, src_ref, src_data, rot, rot_slots, scale, scale_slots,
                      trans, trans_slots)
        return out, self._push(blk)

    def instance(self, template_data, template_ref, anchors_data, anchors_ref):
        na = len(anchors_data)
        out = (np.asarray(anchors_data)[:, None, :]
               + np.asarray(template_data)[None, :, :]).reshape(-1, 3)
        if template_ref is None and anchors_ref is None:
            return out, None
        blk = _Instance(out, template_ref, np.asarray(template_data),
                        anchors_ref, np.asarray(anchors_data))
        return out, self._push(blk)

    def concat(self, parts) -> tuple[np.ndarray, int | None]:
        """parts: sequence of (data, ref)."""
        datas = [np.asarray(d) for d, _ in parts]
        out = np.vstack(datas) if datas else np.zeros((0, 3))
        if all(ref is None for _, ref in parts):
            return out, None
        blk = _Concat(out, [(ref, d) for d, (_, ref) in zip(datas, parts)])
        return out, self._push(blk)

    def _push(self, blk) -> int:
        self.blocks.append(blk)
        return len(self.blocks) - 1

    # backward ------------------------------------------------------------

    def backward(self, block_seeds: dict[int, np.ndarray] | None = None,
                 scalar_seeds: dict[int, float] | None = None) -> np.ndarray:
        """Propagate adjoints and return the per-slot scalar adjoint array."""
        adj = np.zeros(len(self.entries))
        badj: dict[int, np.ndarray] = {}
        if block_seeds:
            for i, g in block_seeds.items():
                badj[i] = np.asarray(g, dtype=float)
        if scalar_seeds:
            for i, g in scalar_seeds.items():
                adj[i] += g
        for bi in range(len(self.blocks) - 1, -1, -1):
            g = badj.pop(bi, None)
            if g is not None:
                self.blocks[bi].vjp(g, adj, badj)
        ent = self.entries
        for i in range(len(ent) - 1, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            _, a, b, _, pa, pb = ent[i]
            if a >= 0:
                adj[a] += pa * g
            if b >= 0:
                adj[b] += pb * g
        return adj

    def grad(self, adj: np.ndarray) -> dict[str, float]:
        """Read named-input adjoints out of a backward() result."""
        return {name: float(adj[i]) for name, i in self.inputs.items()}

    # integrity -----------------------------------------------------------

    def replay(self) -> float:
        """Re-execute every recorded operation; return the max abs deviation.

        A healthy tape replays bitwise, so the return value is 0.0.  Also
        verifies every stored partial is finite.
        """
        worst = 0.0
        vals = self.vals
        for i, (op, a, b, c, pa, pb) in enumerate(self.entries):
            if not (math.isfinite(pa) and math.isfinite(pb)):
                raise FloatingPointError(f"non-finite partial at entry {i}")
            ad = vals[a] if a >= 0 else 0.0
            bd = vals[b] if b >= 0 else 0.0
            if op == _INPUT:
                v = c
            elif op == _ADD:
                v = ad + bd
            elif op == _ADDC:
                v = ad + c
            elif op == _SUB:
                v = ad - bd
            elif op == _RSUBC:
                v = c - ad
            elif op == _MUL:
                v = ad * bd
            elif op == _MULC:
                v = ad * c
            elif op == _DIV:
                v = ad / bd
            elif op == _RDIVC:
                v = c / ad
            elif op == _NEG:
                v = -ad
            elif op == _SIN:
                v = math.sin(ad)
            elif op == _COS:
                v = math.cos(ad)
            elif op == _MAXC:
                v = max(ad, c)
            else:
                raise AssertionError(f"unknown opcode {op}")
            worst = max(worst, abs(v - vals[i]))
        for blk in self.blocks:
            out = blk.recompute(self)
            if out.shape != blk.out.shape:
                raise FloatingPointError("block replay changed shape")
            if out.size:
                worst = max(worst, float(np.abs(out - blk.out).max()))
        return worst
