"""Generator and filter node library.

Node functions receive an :class:`EvalContext`, the list of input images
(``Tensor`` of shape (C, H, W)), a dict of parameter tensors and the node's
discrete options, and return a (C, H, W) image with values in [0, 1].
Spatial parameters are expressed in uv units so graphs are resolution
independent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from texpro import tensor as T
from texpro.tensor import Tensor
from texpro.matgraph import noise


@dataclass(frozen=True)
class ParamSpec:
    name: str
    default: tuple[float, ...]
    lo: float
    hi: float

    @property
    def size(self) -> int:
        return len(self.default)


@dataclass(frozen=True)
class NodeSpec:
    kind: str  # "generator" | "filter"
    op_name: str
    params: tuple[ParamSpec, ...]
    input_arity: int
    fn: Callable = field(repr=False, compare=False)
    options: dict = field(default_factory=dict, compare=False)
    min_inputs: int | None = None

    def __post_init__(self):
        if self.kind not in ("generator", "filter"):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if (self.kind == "generator") != (self.input_arity == 0):
            raise ValueError(f"{self.op_name}: generators take 0 inputs, filters at least 1")
        for p in self.params:
            if not all(p.lo <= d <= p.hi for d in p.default):
                raise ValueError(f"{self.op_name}.{p.name}: default outside [{p.lo}, {p.hi}]")

    @property
    def required_inputs(self) -> int:
        return self.input_arity if self.min_inputs is None else self.min_inputs

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(f"{self.op_name} has no parameter {name!r}")


@dataclass
class EvalContext:
    resolution: int
    seed: int

    def __post_init__(self):
        self.u, self.v = noise.texel_grid(self.resolution)

    def node_seed(self, opts: dict) -> int:
        return int(np.random.SeedSequence([self.seed, int(opts.get("seed", 0))]).generate_state(1)[0])


_REGISTRY: dict[str, NodeSpec] = {}


def _node(kind, name, params=(), arity=0, options=None, min_inputs=None):
    def register(fn):
        spec = NodeSpec(kind, name, tuple(ParamSpec(*p) for p in params), arity, fn,
                        dict(options or {}), min_inputs)
        _REGISTRY[name] = spec
        return fn
    return register


def node_library() -> list[NodeSpec]:
    return list(_REGISTRY.values())


def get_spec(op_name: str) -> NodeSpec:
    try:
        return _REGISTRY[op_name]
    except KeyError:
        raise ValueError(f"unknown node op {op_name!r}") from None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64)[None], _check=False)


def to_channels(img: Tensor, channels: int) -> Tensor:
    c = img.shape[0]
    if c == channels:
        return img
    if channels == 1:
        return T.mean(img, axis=0, keepdims=True)
    if c == 1:
        return T.broadcast_to(img, (channels,) + img.shape[1:])
    raise ValueError(f"cannot convert {c}-channel image to {channels} channels")


def _match(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    c = max(a.shape[0], b.shape[0])
    return to_channels(a, c), to_channels(b, c)


def _vec(p: Tensor) -> Tensor:
    return T.reshape(p, (-1, 1, 1))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


@_node("generator", "uniform-color", [("color", (0.5, 0.5, 0.5), 0.0, 1.0)])
def uniform_color(ctx, inputs, p, opts):
    r = ctx.resolution
    return T.broadcast_to(_vec(p["color"]), (p["color"].shape[0], r, r))


@_node("generator", "uniform-gray", [("value", (0.5,), 0.0, 1.0)])
def uniform_gray(ctx, inputs, p, opts):
    r = ctx.resolution
    return T.broadcast_to(_vec(p["value"]), (1, r, r))


@_node("generator", "checker", options={"cells": 8})
def checker(ctx, inputs, p, opts):
    n = int(opts["cells"])
    pat = (np.floor(ctx.u * n) + np.floor(ctx.v * n)) % 2
    return _const(pat)


@_node("generator", "brick",
       [("mortar", (0.01,), 0.0, 0.05), ("bevel", (0.004,), 0.0005, 0.03)],
       options={"rows": 8, "cols": 4, "offset": 0.5})
def brick(ctx, inputs, p, opts):
    d = noise.brick_distance(ctx.resolution, int(opts["rows"]), int(opts["cols"]),
                             float(opts["offset"]))
    x = (_const(d) - p["mortar"] * 0.5) / p["bevel"]
    return T.sigmoid(x)


@_node("generator", "perlin-noise", [("amplitude", (0.8,), 0.0, 1.0)],
       options={"scale": 4, "seed": 0})
def perlin_noise(ctx, inputs, p, opts):
    n = noise.perlin(ctx.resolution, int(opts["scale"]), ctx.node_seed(opts))
    return 0.5 + p["amplitude"] * _const(0.5 * n / noise.PERLIN_MAX)


@_node("generator", "fbm-noise",
       [("amplitude", (0.8,), 0.0, 1.0), ("roughness", (0.5,), 0.1, 0.9)],
       options={"scale": 4, "octaves": 4, "seed": 0})
def fbm_noise(ctx, inputs, p, opts):
    base = ctx.node_seed(opts)
    scale = int(opts["scale"])
    octaves = int(opts["octaves"])
    layers = [noise.perlin(ctx.resolution, scale * 2 ** o, base + o) for o in range(octaves)]
    stack = Tensor(np.stack(layers) * (0.5 / noise.PERLIN_MAX), _check=False)
    expo = np.arange(octaves, dtype=np.float64)
    w = T.pow(p["roughness"], expo)
    w = w / T.sum(w)
    mix = T.sum(stack * T.reshape(w, (-1, 1, 1)), axis=0, keepdims=True)
    return 0.5 + p["amplitude"] * mix


@_node("generator", "tile-random",
       [("luminance", (0.5,), 0.0, 1.0), ("variation", (0.5,), 0.0, 1.0)],
       options={"rows": 8, "cols": 4, "offset": 0.5, "seed": 0})
def tile_random(ctx, inputs, p, opts):
    r = noise.cell_random(ctx.resolution, int(opts["rows"]), int(opts["cols"]),
                          float(opts["offset"]), ctx.node_seed(opts))
    var = p["variation"]
    return (1.0 - var) * p["luminance"] + var * _const(r)


@_node("generator", "stripes", [("phase", (0.0,), 0.0, 1.0)],
       options={"count": 8, "axis": "u"})
def stripes(ctx, inputs, p, opts):
    coord = ctx.u if opts.get("axis", "u") == "u" else ctx.v
    arg = _const(2 * np.pi * int(opts["count"]) * coord) + 2 * np.pi * p["phase"]
    return 0.5 + 0.5 * T.sin(arg)


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------


@_node("filter", "blend", [("opacity", (0.5,), 0.0, 1.0)], arity=3, min_inputs=2,
       options={"mode": "copy"})
def blend(ctx, inputs, p, opts):
    a, b = _match(inputs[0], inputs[1])
    mode = opts.get("mode", "copy")
    if mode == "copy":
        target = b
    elif mode == "multiply":
        target = a * b
    elif mode == "screen":
        target = 1.0 - (1.0 - a) * (1.0 - b)
    else:
        raise ValueError(f"blend: unknown mode {mode!r}")
    amount = p["opacity"]
    if len(inputs) > 2 and inputs[2] is not None:
        amount = amount * to_channels(inputs[2], 1)
    return a + amount * (target - a)


@_node("filter", "levels",
       [("in_low", (0.0,), 0.0, 0.45), ("in_high", (1.0,), 0.55, 1.0),
        ("gamma", (1.0,), 0.2, 5.0), ("out_low", (0.0,), 0.0, 1.0),
        ("out_high", (1.0,), 0.0, 1.0)], arity=1)
def levels(ctx, inputs, p, opts):
    x = inputs[0]
    t = T.clip((x - p["in_low"]) / (p["in_high"] - p["in_low"]), 0.0, 1.0)
    t = T.pow(t, 1.0 / p["gamma"])
    return p["out_low"] + (p["out_high"] - p["out_low"]) * t


_YIQ = np.array([[0.299, 0.587, 0.114],
                 [0.595716, -0.274453, -0.321263],
                 [0.211456, -0.522591, 0.311135]])
_YIQ_INV = np.linalg.inv(_YIQ)


@_node("filter", "hsv-adjust",
       [("hue", (0.0,), -0.5, 0.5), ("saturation", (1.0,), 0.0, 2.0),
        ("value", (1.0,), 0.0, 2.0)], arity=1)
def hsv_adjust(ctx, inputs, p, opts):
    """Hue rotation / chroma scale in YIQ space, then a brightness multiplier."""
    x = to_channels(inputs[0], 3)
    C, H, W = x.shape
    flat = T.reshape(x, (3, H * W))
    yiq = Tensor(_YIQ, _check=False) @ flat
    ang = 2 * np.pi * p["hue"]
    c, s = T.cos(ang), T.sin(ang)
    sat = p["saturation"]
    i, q = yiq[1:2], yiq[2:3]
    i2 = sat * (c * i - s * q)
    q2 = sat * (s * i + c * q)
    rot = T.concat([yiq[0:1], i2, q2], axis=0)
    rgb = Tensor(_YIQ_INV, _check=False) @ rot
    return T.clip(T.reshape(rgb * p["value"], (3, H, W)), 0.0, 1.0)


BLUR_SIGMA_MAX = 0.02


@_node("filter", "gaussian-blur", [("sigma", (0.004,), 0.0005, BLUR_SIGMA_MAX)], arity=1)
def gaussian_blur(ctx, inputs, p, opts):
    x = inputs[0]
    res = ctx.resolution
    radius = max(1, int(np.ceil(3 * BLUR_SIGMA_MAX * res)))
    radius = min(radius, (res - 1) // 2) if res > 2 else 0
    if radius == 0:
        return x
    pos = np.arange(-radius, radius + 1, dtype=np.float64) / res
    k = T.exp(Tensor(-0.5 * pos * pos, _check=False) / (p["sigma"] * p["sigma"]))
    k = k / T.sum(k)
    C = x.shape[0]
    xb = T.reshape(x, (C, 1, res, res))
    y = T.conv2d(xb, T.reshape(k, (1, 1, 1, -1)), padding="circular")
    y = T.conv2d(y, T.reshape(k, (1, 1, -1, 1)), padding="circular")
    return T.reshape(y, (C, res, res))


@_node("filter", "directional-warp",
       [("intensity", (0.02,), 0.0, 0.1), ("angle", (0.0,), 0.0, 1.0)], arity=2)
def directional_warp(ctx, inputs, p, opts):
    """Displace ``inputs[0]`` along a direction by ``inputs[1]`` (centred at 0.5)."""
    a, warp = inputs[0], to_channels(inputs[1], 1)
    C, H, W = a.shape
    ang = 2 * np.pi * p["angle"]
    disp = (T.reshape(warp, (H * W,)) - 0.5) * p["intensity"]
    u = Tensor(ctx.u.reshape(-1), _check=False) + disp * T.cos(ang)
    v = Tensor(ctx.v.reshape(-1), _check=False) + disp * T.sin(ang)
    return T.reshape(T.sample_bilinear(a, u, v), (C, H, W))


@_node("filter", "invert", [("amount", (1.0,), 0.0, 1.0)], arity=1)
def invert(ctx, inputs, p, opts):
    x = inputs[0]
    return x + p["amount"] * (1.0 - 2.0 * x)


_DIFF = np.zeros((2, 1, 3, 3))
_DIFF[0, 0, 1, 0], _DIFF[0, 0, 1, 2] = -0.5, 0.5
_DIFF[1, 0, 0, 1], _DIFF[1, 0, 2, 1] = -0.5, 0.5


@_node("filter", "normal-from-height", [("intensity", (0.02,), 0.0, 0.1)], arity=1)
def normal_from_height(ctx, inputs, p, opts):
    """Tangent-space normal map (encoded to [0, 1]) from a height field."""
    h = to_channels(inputs[0], 1)
    res = ctx.resolution
    # slopes in height per uv unit; tangent axes follow +u (columns), +v (rows)
    grad = T.conv2d(h, Tensor(_DIFF * res, _check=False), padding="circular")
    nx = -p["intensity"] * grad[0:1]
    ny = -p["intensity"] * grad[1:2]
    inv_len = T.pow(nx * nx + ny * ny + 1.0, -0.5)
    n = T.concat([nx * inv_len, ny * inv_len, inv_len], axis=0)
    return 0.5 + 0.5 * n


@_node("filter", "contrast",
       [("contrast", (1.0,), 0.0, 3.0), ("brightness", (0.0,), -0.5, 0.5)], arity=1)
def contrast(ctx, inputs, p, opts):
    x = inputs[0]
    return T.clip((x - 0.5) * p["contrast"] + 0.5 + p["brightness"], 0.0, 1.0)
