"""Min-aggregation graph networks that learn Bellman-Ford steps."""

from .graph import AttributedGraph, bf_k, bf_step, brute_force_khop, reachable_nodes
from .model import MinAggConfig, MinAggGnnParams, SimpleGnnParams, build_exact_bf, forward

__all__ = [
    "AttributedGraph",
    "MinAggConfig",
    "MinAggGnnParams",
    "SimpleGnnParams",
    "bf_k",
    "bf_step",
    "brute_force_khop",
    "build_exact_bf",
    "forward",
    "reachable_nodes",
]
