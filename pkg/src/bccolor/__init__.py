"""Round-synchronous broadcast-CONGEST / streaming-broadcast simulator
for randomized (Delta+1)-coloring, with bandwidth and memory budgets
enforced as runtime contracts."""

__version__ = "0.1.0"

from .config import Config, RunConfig
from .graph import Graph, GraphModel, generate, parse_edge_list, emit_edge_list, sparsity

__all__ = [
    "Config", "RunConfig", "Graph", "GraphModel", "generate",
    "parse_edge_list", "emit_edge_list", "sparsity", "__version__",
]
