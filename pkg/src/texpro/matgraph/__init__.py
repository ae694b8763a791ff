"""Differentiable procedural material graphs."""
from texpro.matgraph.nodes import NodeSpec, ParamSpec, get_spec, node_library
from texpro.matgraph.graph import (
    CHANNELS, Edge, GraphError, MaterialGraph, NodeInstance, ParamLayout, TextureMapSet,
    evaluate, flatten_params, load_graph, save_graph, unflatten_params,
)

__all__ = [
    "CHANNELS", "Edge", "GraphError", "MaterialGraph", "NodeInstance", "NodeSpec",
    "ParamLayout", "ParamSpec", "TextureMapSet", "evaluate", "flatten_params", "get_spec",
    "load_graph", "node_library", "save_graph", "unflatten_params",
]
