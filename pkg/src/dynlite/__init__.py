"""dynlite: a small dynamic-shape LLM inference runtime over numpy."""

from dynlite.graphir import Graph, ToyConfig, build_toy_decoder, load_graph, save_graph
from dynlite.refexec import NAIVE, OPTIMIZED, Session, SessionOptions, generate
from dynlite.shapeinfer import compile_plan
from dynlite.symexpr import SymExpr, compare, parse

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "ToyConfig",
    "build_toy_decoder",
    "load_graph",
    "save_graph",
    "Session",
    "SessionOptions",
    "OPTIMIZED",
    "NAIVE",
    "generate",
    "compile_plan",
    "SymExpr",
    "compare",
    "parse",
]
