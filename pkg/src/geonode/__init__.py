"""Differentiable shape programs: node graphs compiled to meshes, with
gradients, render-and-compare scoring, and tree search over parameters."""

__version__ = "0.1.0"

from .evaluator import EvalResult, EvaluationError, NodeCache, backward, evaluate
from .geometry import GeometryError, Mesh, PointSet, write_obj
from .graph import (GraphError, ParameterAssignment, ShapeGraph,
                    bundled_graph_names, default_assignment, load_bundled,
                    load_graph, parse_graph, serialize_graph)
from .objective import (Camera, LossBreakdown, LossConfig, ObservedView,
                        chamfer_loss, loss, render_depth)
from .search import SearchConfig, SearchResult, random_search, run_search

__all__ = [
    "__version__",
    "Camera", "EvalResult", "EvaluationError", "GeometryError", "GraphError",
    "LossBreakdown", "LossConfig", "Mesh", "NodeCache", "ObservedView",
    "ParameterAssignment", "PointSet", "SearchConfig", "SearchResult",
    "ShapeGraph", "backward", "bundled_graph_names", "chamfer_loss",
    "default_assignment", "evaluate", "load_bundled", "load_graph", "loss",
    "parse_graph", "random_search", "render_depth", "run_search",
    "serialize_graph", "write_obj",
]
