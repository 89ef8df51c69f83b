"""Parameter recovery: coarse tree search over discretized parameters with
gradient refinement at the leaves.

The search tree has one level per parameter.  Rotation about the up axis
is searched first (it moves every surface), then shape parameters in
descending order of geometric influence, then translation, which keeps a
single candidate (its initialization) and is left to refinement.  All
tree statistics live in a table shared by value: two paths that assign
the same value to the same parameter share one (parameter, value) entry.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .evaluator import NodeCache, backward, evaluate
from .geometry import GeometryError, sample_surface
from .graph import (GraphError, ParameterAssignment, ShapeGraph,
                    default_assignment)
from .objective import LossBreakdown, LossConfig, chamfer_loss, loss

ROTATION_LEVEL = "pose.rotation"
TRANSLATION_LEVEL = "pose.translation"


@dataclass(frozen=True)
class Level:
    name: str
    role: str            # "rotation" | "shape" | "translation"
    candidates: tuple


@dataclass(frozen=True)
class ParameterTreeSpec:
    levels: tuple[Level, ...]

    def names(self) -> list[str]:
        return [lv.name for lv in self.levels]


@dataclass
class SearchConfig:
    iterations: int = 300
    simulations: int = 30
    exploration: float = 0.2
    float_bins: int = 5
    exploit: bool = True          # score term in the selection rule
    refine: bool = True
    refine_steps: int = 100
    refine_lr: float = 0.05
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    influence_probes: int = 8
    probe_samples: int = 512


class ScoreTable:
    """Shared (parameter, value) statistics: running mean reward and visits."""

    def __init__(self):
        self.stats: dict[tuple[str, int], list] = {}
        self.iterations = 0

    def visits(self, key) -> int:
        s = self.stats.get(key)
        return s[1] if s else 0

    def mean(self, key) -> float:
        s = self.stats.get(key)
        return s[0] if s else 0.0

    def update(self, key, reward: float) -> None:
        s = self.stats.setdefault(key, [0.0, 0])
        s[1] += 1
        s[0] += (reward - s[0]) / s[1]


def ucb(key, table: ScoreTable, config: SearchConfig) -> float:
    """Selection score; unvisited entries are infinitely attractive."""
    s = table.stats.get(key)
    if not s or s[1] == 0:
        return math.inf
    exploit = s[0] if config.exploit else 0.0
    return exploit + config.exploration * math.sqrt(
        math.log(max(table.iterations, 1)) / s[1])


def candidate_values(spec, config: SearchConfig) -> tuple:
    """Discretized candidates for one parameter spec."""
    if spec.kind == "bool":
        return (False, True)
    if spec.kind == "int":
        lo, hi = spec.range
        return tuple(range(lo, hi + 1))
    lo, hi = spec.range
    k = config.float_bins
    return tuple(lo + (i + 0.5) * (hi - lo) / k for i in range(k))


def _influence(graph: ShapeGraph, config: SearchConfig) -> dict[str, float]:
    """Chamfer variance when sweeping one parameter, others at defaults."""
    base = default_assignment(graph)
    ref = evaluate(graph, base, differentiable=False)
    rng = np.random.default_rng(config.seed)
    ref_pts, _, _ = sample_surface(ref.mesh, config.probe_samples, rng)
    out: dict[str, float] = {}
    for p in graph.parameters:
        cands = candidate_values(p, config)
        if len(cands) > config.influence_probes:
            idx = np.linspace(0, len(cands) - 1, config.influence_probes)
            cands = tuple(cands[int(round(i))] for i in idx)
        vals = []
        for c in cands:
            a = base.copy()
            a.values[p.name] = c
            try:
                r = evaluate(graph, a, differentiable=False)
                cd, _ = chamfer_loss(ref_pts, r.mesh, config.probe_samples,
                                     config.seed)
            except (GeometryError, GraphError, RuntimeError):
                continue
            vals.append(cd)
        out[p.name] = float(np.var(vals)) if len(vals) > 1 else 0.0
    return out


def build_tree_spec(graph: ShapeGraph, scene, config: SearchConfig
                    ) -> ParameterTreeSpec:
    """Level ordering for one recovery problem.

    scene provides the translation initialization; everything else is a
    property of the graph and the discretization config.
    """
    infl = _influence(graph, config)
    shape = sorted(graph.parameters, key=lambda p: (-infl[p.name], p.name))
    levels = [Level(ROTATION_LEVEL, "rotation",
                    (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi))]
    for p in shape:
        levels.append(Level(p.name, "shape", candidate_values(p, config)))
    tinit = tuple(float(x) for x in np.asarray(scene.translation_init,
                                               dtype=float))
    levels.append(Level(TRANSLATION_LEVEL, "translation", (tinit,)))
    return ParameterTreeSpec(tuple(levels))


@dataclass
class TraceRow:
    iteration: int
    best_loss: float
    evaluations: int


@dataclass
class SearchResult:
    best: ParameterAssignment
    best_loss: LossBreakdown
    trace: list[TraceRow]
    table: ScoreTable
    evaluations: int              # full objective evaluations
    refine_evaluations: int       # chamfer-only refinement steps
    wall_seconds: float
    tree: ParameterTreeSpec


def _assemble(tree: ParameterTreeSpec, choice_idx: dict[str, int]
              ) -> ParameterAssignment:
    values = {}
    rotation = 0.0
    translation = (0.0, 0.0, 0.0)
    for lv in tree.levels:
        c = lv.candidates[choice_idx[lv.name]]
        if lv.role == "rotation":
            rotation = c
        elif lv.role == "translation":
            translation = c
        else:
            values[lv.name] = c
    return ParameterAssignment(values, rotation, np.array(translation))


class _Evaluator:
    """Counts full-objective evaluations and tracks the global best."""

    def __init__(self, graph, scene, config, cache):
        self.graph = graph
        self.scene = scene
        self.config = config
        self.cache = cache
        self.count = 0
        self.best: ParameterAssignment | None = None
        self.best_loss: LossBreakdown | None = None
        self.lo = math.inf   # running min/max of raw -loss for normalization
        self.hi = -math.inf

    def eval_full(self, a: ParameterAssignment) -> LossBreakdown | None:
        """One counted objective evaluation; None when the program fails."""
        self.count += 1
        try:
            res = evaluate(self.graph, a, self.cache, differentiable=False)
            br = loss(res, self.scene.views, self.scene.points,
                      self.config.loss)
        except (GeometryError, GraphError, RuntimeError):
            return None
        v = -br.total
        if math.isfinite(v):
            self.lo = min(self.lo, v)
            self.hi = max(self.hi, v)
        if self.best_loss is None or br.total < self.best_loss.total:
            self.best = a.copy()
            self.best_loss = br
        return br

    def __call__(self, a: ParameterAssignment) -> float:
        br = self.eval_full(a)
        return -br.total if br is not None else -math.inf

    def normalize(self, v: float) -> float:
        if not math.isfinite(v):
            return 0.0
        if not (math.isfinite(self.lo) and self.hi > self.lo):
            return 0.5
        return (v - self.lo) / (self.hi - self.lo)


class Adam:
    """Plain Adam with bias correction."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def refine(graph: ShapeGraph, scene, start: ParameterAssignment,
           config: SearchConfig, cache: NodeCache | None = None,
           evaluator: _Evaluator | None = None
           ) -> tuple[ParameterAssignment, LossBreakdown, int, int]:
    """Continuous refinement of one assignment.

    Runs Adam on the chamfer term (the differentiable part of the
    objective), tracking the best chamfer iterate, then picks between the
    start point and that iterate by full objective value, so refinement
    never returns something worse than its input.  Returns (assignment,
    breakdown, full evaluations used, chamfer-only steps used).
    """
    own = evaluator is None
    ev = evaluator if evaluator is not None else \
        _Evaluator(graph, scene, config, cache)
    names = [p.name for p in graph.continuous_params()]
    chamfer_steps = 0
    best_cd = math.inf
    best_iter: ParameterAssignment | None = None
    if config.refine_steps > 0:
        cur = start.copy()
        opt = Adam(len(names) + 4, config.refine_lr)
        pts = np.asarray(scene.points, dtype=float)
        for _ in range(config.refine_steps):
            try:
                res = evaluate(graph, cur, cache, differentiable=True)
                cd, gv = chamfer_loss(pts, res.mesh,
                                      config.loss.chamfer_samples,
                                      config.loss.chamfer_seed)
            except (GeometryError, GraphError, RuntimeError):
                break
            chamfer_steps += 1
            if cd < best_cd:
                best_cd = cd
                best_iter = cur.copy()
            g = backward(res, gv)
            gvec = np.array([g[n] for n in names]
                            + [g["pose.rotation"], g["pose.tx"],
                               g["pose.ty"], g["pose.tz"]])
            if not np.isfinite(gvec).all():
                break
            x = np.array([cur.values[n] for n in names]
                         + [cur.rotation, *cur.translation])
            x = opt.step(x, gvec)
            nxt = cur.copy()
            for i, n in enumerate(names):
                lo, hi = graph.param(n).range
                nxt.values[n] = float(min(max(x[i], lo), hi))
            nxt.rotation = float(x[len(names)]) % (2.0 * math.pi)
            nxt.translation = x[len(names) + 1:]
            cur = nxt
    outcomes: list[tuple[LossBreakdown | None, ParameterAssignment]] = []
    outcomes.append((ev.eval_full(start), start))
    if best_iter is not None:
        outcomes.append((ev.eval_full(best_iter), best_iter))
    valid = [(br, a) for br, a in outcomes if br is not None]
    used = ev.count if own else 0
    if not valid:
        bad = LossBreakdown(math.inf, math.inf, math.inf, math.inf)
        return start.copy(), bad, used, chamfer_steps
    br, a = min(valid, key=lambda t: t[0].total)
    return a.copy(), br, used, chamfer_steps


def run_search(graph: ShapeGraph, scene, config: SearchConfig,
               tree: ParameterTreeSpec | None = None,
               cache: NodeCache | None = None) -> SearchResult:
    """Tree search over the discretized parameter space."""
    t0 = time.perf_counter()
    if tree is None:
        tree = build_tree_spec(graph, scene, config)
    if cache is None:
        cache = NodeCache()
    table = ScoreTable()
    ev = _Evaluator(graph, scene, config, cache)
    refine_steps_total = 0
    trace: list[TraceRow] = []
    levels = tree.levels

    for it in range(config.iterations):
        path_keys: list[tuple[str, int]] = []
        choice: dict[str, int] = {}
        expanded_at = None
        for li, lv in enumerate(levels):
            n_c = len(lv.candidates)
            pick = None
            for ci in range(n_c):
                if table.visits((lv.name, ci)) == 0:
                    pick = ci
                    break
            if pick is not None:
                expanded_at = li
                path_keys.append((lv.name, pick))
                choice[lv.name] = pick
                break
            best_ci, best_u = 0, -math.inf
            for ci in range(n_c):
                u = ucb((lv.name, ci), table, config)
                if u > best_u:
                    best_ci, best_u = ci, u
            path_keys.append((lv.name, best_ci))
            choice[lv.name] = best_ci

        values_seen: list[float] = []
        if expanded_at is not None and expanded_at < len(levels) - 1:
            rest = levels[expanded_at + 1:]
            space = 1
            for lv in rest:
                space *= len(lv.candidates)
                if space > 10 ** 9:
                    break
            n_roll = min(config.simulations, space)
            if space <= config.simulations:
                completions = list(itertools.product(
                    *[range(len(lv.candidates)) for lv in rest]))
            else:
                rng = np.random.default_rng([config.seed, it])
                tried: set[tuple] = set()
                completions = []
                while len(completions) < n_roll:
                    cand = tuple(int(rng.integers(len(lv.candidates)))
                                 for lv in rest)
                    if cand in tried:
                        continue
                    tried.add(cand)
                    completions.append(cand)
            for comp in completions:
                full = dict(choice)
                for lv, ci in zip(rest, comp):
                    full[lv.name] = ci
                values_seen.append(ev(_assemble(tree, full)))
        else:
            # complete path: a fresh last-level expansion or a full leaf
            a = _assemble(tree, choice)
            if config.refine and expanded_at is None:
                _, br, _, csteps = refine(graph, scene, a, config, cache,
                                          evaluator=ev)
                refine_steps_total += csteps
                values_seen.append(-br.total)
            else:
                values_seen.append(ev(a))

        finite = [v for v in values_seen if math.isfinite(v)]
        reward = ev.normalize(max(finite)) if finite else 0.0
        for key in path_keys:
            table.update(key, reward)
        table.iterations += 1
        best_total = ev.best_loss.total if ev.best_loss else math.inf
        trace.append(TraceRow(it + 1, best_total, ev.count))

    if ev.best is None:
        ev.best = _assemble(tree, {lv.name: 0 for lv in levels})
        ev.best_loss = LossBreakdown(math.inf, math.inf, math.inf, math.inf)
    return SearchResult(best=ev.best, best_loss=ev.best_loss, trace=trace,
                        table=table, evaluations=ev.count,
                        refine_evaluations=refine_steps_total,
                        wall_seconds=time.perf_counter() - t0, tree=tree)


def audit_search(result: SearchResult) -> list[str]:
    """Accounting checks that must hold after any completed run.

    Returns a list of violations, empty when the books balance: the
    best-so-far trace never increases, score-table entries stay inside
    the normalized reward range, and root-level visits sum to the
    iteration count.
    """
    problems: list[str] = []
    prev = math.inf
    for row in result.trace:
        if row.best_loss > prev:
            problems.append(
                f"best-so-far loss increased at iteration {row.iteration}")
            break
        prev = row.best_loss
    for key, (mean, visits) in result.table.stats.items():
        if visits < 0 or not (0.0 <= mean <= 1.0):
            problems.append(f"score entry {key}: mean={mean} visits={visits} "
                            f"out of bounds")
            break
    if result.tree.levels:
        root = result.tree.levels[0]
        root_visits = sum(result.table.visits((root.name, ci))
                          for ci in range(len(root.candidates)))
        if root_visits != result.table.iterations:
            problems.append(f"root visits {root_visits} != iterations "
                            f"{result.table.iterations}")
    return problems


def random_search(graph: ShapeGraph, scene, budget: int,
                  config: SearchConfig) -> SearchResult:
    """Uniform sampling of full assignments under a fixed evaluation budget."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    ev = _Evaluator(graph, scene, config, NodeCache())
    tinit = np.asarray(scene.translation_init, dtype=float)
    trace: list[TraceRow] = []
    for it in range(budget):
        values: dict[str, object] = {}
        for p in graph.parameters:
            if p.kind == "float":
                values[p.name] = float(rng.uniform(*p.range))
            elif p.kind == "int":
                values[p.name] = int(rng.integers(p.range[0], p.range[1] + 1))
            else:
                values[p.name] = bool(rng.random() < 0.5)
        a = ParameterAssignment(values, float(rng.uniform(0.0, 2.0 * math.pi)),
                                tinit.copy())
        ev(a)
        best_total = ev.best_loss.total if ev.best_loss else math.inf
        trace.append(TraceRow(it + 1, best_total, ev.count))
    if ev.best is None:
        ev.best = default_assignment(graph)
        ev.best_loss = LossBreakdown(math.inf, math.inf, math.inf, math.inf)
    return SearchResult(best=ev.best, best_loss=ev.best_loss, trace=trace,
                        table=ScoreTable(), evaluations=ev.count,
                        refine_evaluations=0,
                        wall_seconds=time.perf_counter() - t0,
                        tree=ParameterTreeSpec(()))
