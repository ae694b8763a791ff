"""Material graphs: structure, evaluation to texture maps, parameter vectors."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

from texpro import tensor as T
from texpro.tensor import Tensor
from texpro.matgraph.nodes import EvalContext, get_spec, to_channels

CHANNELS = ("basecolor", "normal", "roughness", "metallic")
REQUIRED_CHANNELS = ("basecolor", "normal", "roughness")
CHANNEL_DEPTH = {"basecolor": 3, "normal": 3, "roughness": 1, "metallic": 1}
MAX_RESOLUTION = 2048
FORMAT = "texpro-graph/1"


class GraphError(ValueError):
    pass


@dataclass
class NodeInstance:
    id: str
    op: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    fixed: set[str] = field(default_factory=set)

    def __post_init__(self):
        spec = get_spec(self.op)
        opts = dict(spec.options)
        opts.update(self.options)
        self.options = opts
        values = {}
        for ps in spec.params:
            raw = self.params.get(ps.name, ps.default)
            arr = np.atleast_1d(np.asarray(raw, dtype=np.float64)).copy()
            if arr.shape != (ps.size,):
                raise GraphError(f"{self.id}.{ps.name}: expected {ps.size} values, got {arr.size}")
            values[ps.name] = arr
        unknown = set(self.params) - set(values)
        if unknown:
            raise GraphError(f"{self.id}: unknown parameters {sorted(unknown)} for {self.op}")
        self.params = values
        self.fixed = set(self.fixed)

    @property
    def spec(self):
        return get_spec(self.op)


@dataclass
class Edge:
    src: str
    dst: str
    slot: int


@dataclass
class TextureMapSet:
    basecolor: Tensor
    normal: Tensor
    roughness: Tensor
    metallic: Tensor | None
    resolution: int

    def channels(self) -> dict[str, Tensor]:
        out = {"basecolor": self.basecolor, "normal": self.normal, "roughness": self.roughness}
        if self.metallic is not None:
            out["metallic"] = self.metallic
        return out


class MaterialGraph:
    """Acyclic generator/filter graph with output bindings to PBR channels."""

    def __init__(self, nodes, edges=(), outputs=None, name: str = ""):
        self.name = name
        self.nodes: list[NodeInstance] = list(nodes)
        self.edges: list[Edge] = [e if isinstance(e, Edge) else Edge(*e) for e in edges]
        self.outputs: dict[str, str] = dict(outputs or {})
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate node ids")
        self._by_id = {n.id: n for n in self.nodes}
        for e in self.edges:
            if e.src not in self._by_id or e.dst not in self._by_id:
                raise GraphError(f"edge {e.src}->{e.dst} references an unknown node")
        for ch, nid in self.outputs.items():
            if ch not in CHANNELS:
                raise GraphError(f"unknown output channel {ch!r}")
            if nid not in self._by_id:
                raise GraphError(f"output {ch} bound to unknown node {nid!r}")

    def node(self, node_id: str) -> NodeInstance:
        return self._by_id[node_id]

    def copy(self) -> MaterialGraph:
        return copy.deepcopy(self)

    def inputs_of(self, node_id: str) -> list[str | None]:
        spec = self._by_id[node_id].spec
        slots: list[str | None] = [None] * spec.input_arity
        for e in self.edges:
            if e.dst == node_id:
                if not 0 <= e.slot < spec.input_arity:
                    raise GraphError(f"{node_id}: input slot {e.slot} out of range")
                slots[e.slot] = e.src
        return slots

    def topological_order(self) -> list[str]:
        ts = TopologicalSorter({n.id: set() for n in self.nodes})
        for e in self.edges:
            ts.add(e.dst, e.src)
        try:
            order = list(ts.static_order())
        except CycleError as exc:
            raise GraphError(f"material graph contains a cycle: {exc.args[1]}") from None
        # stable order: position in the node list among ready nodes
        rank = {n.id: i for i, n in enumerate(self.nodes)}
        deps = {n.id: {e.src for e in self.edges if e.dst == n.id} for n in self.nodes}
        done: list[str] = []
        pending = sorted(order, key=rank.get)
        while pending:
            for nid in pending:
                if deps[nid] <= set(done):
                    done.append(nid)
                    pending.remove(nid)
                    break
        return done

    def validate(self) -> None:
        self.topological_order()
        missing = [c for c in REQUIRED_CHANNELS if c not in self.outputs]
        if missing:
            raise GraphError(f"unbound required channels: {missing}")
        for n in self.nodes:
            slots = self.inputs_of(n.id)
            need = n.spec.required_inputs
            if any(s is None for s in slots[:need]):
                raise GraphError(f"node {n.id} ({n.op}) needs {need} connected inputs")

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            entry = {"id": n.id, "op": n.op,
                     "params": {k: [float(x) for x in v] for k, v in n.params.items()}}
            spec_opts = n.spec.options
            opts = {k: v for k, v in n.options.items() if k not in spec_opts or spec_opts[k] != v}
            if opts:
                entry["options"] = opts
            if n.fixed:
                entry["fixed"] = sorted(n.fixed)
            nodes.append(entry)
        return {
            "format": FORMAT,
            "name": self.name,
            "nodes": nodes,
            "edges": [{"from": e.src, "to": e.dst, "slot": e.slot} for e in self.edges],
            "outputs": dict(sorted(self.outputs.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MaterialGraph:
        if d.get("format", FORMAT) != FORMAT:
            raise GraphError(f"unsupported graph format {d.get('format')!r}")
        nodes = [NodeInstance(n["id"], n["op"], n.get("params", {}), n.get("options", {}),
                              set(n.get("fixed", ()))) for n in d["nodes"]]
        edges = [Edge(e["from"], e["to"], int(e.get("slot", 0))) for e in d.get("edges", [])]
        return cls(nodes, edges, d.get("outputs", {}), d.get("name", ""))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def load_graph(path) -> MaterialGraph:
    with open(path, encoding="utf-8") as fh:
        return MaterialGraph.from_dict(json.load(fh))


def save_graph(graph: MaterialGraph, path) -> None:
    Path(path).write_text(graph.dumps(), encoding="utf-8")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _check_resolution(resolution: int) -> None:
    r = int(resolution)
    if r != resolution or r < 1 or r > MAX_RESOLUTION or r & (r - 1):
        raise GraphError(f"resolution must be a power of two <= {MAX_RESOLUTION}, got {resolution}")


def evaluate(graph: MaterialGraph, resolution: int, seed: int = 0,
             params: dict[tuple[str, str], Tensor] | None = None) -> TextureMapSet:
    """Evaluate ``graph`` into texture maps.

    ``params`` optionally maps ``(node_id, param_name)`` to tensors that
    replace the stored values; this is how gradients reach the parameters.
    """
    _check_resolution(resolution)
    graph.validate()
    ctx = EvalContext(int(resolution), int(seed))
    params = params or {}
    results: dict[str, Tensor] = {}
    for nid in graph.topological_order():
        node = graph.node(nid)
        p = {name: params.get((nid, name)) for name in node.params}
        p = {k: (v if v is not None else Tensor(node.params[k], _check=False)) for k, v in p.items()}
        inputs = [results[s] if s is not None else None for s in graph.inputs_of(nid)]
        while inputs and inputs[-1] is None and len(inputs) > node.spec.required_inputs:
            inputs.pop()
        results[nid] = node.spec.fn(ctx, inputs, p, node.options)

    maps = {}
    for ch in CHANNELS:
        if ch in graph.outputs:
            maps[ch] = to_channels(results[graph.outputs[ch]], CHANNEL_DEPTH[ch])
    return TextureMapSet(maps["basecolor"], maps["normal"], maps["roughness"],
                         maps.get("metallic"), int(resolution))


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamEntry:
    node_id: str
    name: str
    offset: int
    size: int
    lo: float
    hi: float


@dataclass
class ParamLayout:
    graph: MaterialGraph
    entries: list[ParamEntry]

    @property
    def size(self) -> int:
        return sum(e.size for e in self.entries)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([np.full(e.size, e.lo) for e in self.entries]) if self.entries else np.zeros(0)
        hi = np.concatenate([np.full(e.size, e.hi) for e in self.entries]) if self.entries else np.zeros(0)
        return lo, hi

    def values(self, theta) -> np.ndarray:
        """Constrained parameter values for an unconstrained vector (numpy)."""
        lo, hi = self.bounds()
        theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta, np.float64)
        return T.soft_clamp(Tensor(theta), lo=lo, hi=hi).data

    def param_tensors(self, theta: Tensor, offset: int = 0) -> dict[tuple[str, str], Tensor]:
        """Differentiable constrained parameter tensors sliced from ``theta``."""
        out = {}
        for e in self.entries:
            raw = theta[offset + e.offset: offset + e.offset + e.size]
            out[(e.node_id, e.name)] = T.soft_clamp(raw, lo=e.lo, hi=e.hi)
        return out


def flatten_params(graph: MaterialGraph) -> tuple[Tensor, ParamLayout]:
    """Collect optimisable parameters, mapped to unconstrained space."""
    entries: list[ParamEntry] = []
    chunks: list[np.ndarray] = []
    offset = 0
    for n in graph.nodes:
        for ps in n.spec.params:
            if ps.name in n.fixed:
                continue
            entries.append(ParamEntry(n.id, ps.name, offset, ps.size, ps.lo, ps.hi))
            chunks.append(T.inverse_soft_clamp(n.params[ps.name], ps.lo, ps.hi))
            offset += ps.size
    theta = np.concatenate(chunks) if chunks else np.zeros(0)
    return Tensor(theta), ParamLayout(graph.copy(), entries)


def unflatten_params(layout: ParamLayout, theta) -> MaterialGraph:
    g = layout.graph.copy()
    vals = layout.values(theta)
    for e in layout.entries:
        g.node(e.node_id).params[e.name] = vals[e.offset:e.offset + e.size].copy()
    return g
