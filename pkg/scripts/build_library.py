"""Regenerate the bundled material library graphs under src/texpro/data/materials."""
from __future__ import annotations

import json
import sys
from pathlib import Path

from texpro.matgraph import MaterialGraph, NodeInstance, save_graph

OUT = Path(__file__).resolve().parents[1] / "src" / "texpro" / "data" / "materials"

FLAT = NodeInstance("flat", "uniform-color", {"color": [0.5, 0.5, 1.0]}, fixed={"color"})


def N(id, op, params=None, options=None, fixed=()):
    return NodeInstance(id, op, params or {}, options or {}, set(fixed))


def two_tone(name, c1, c2, mask_nodes, mask_id, rough, opacity=1.0, height=None,
             bump=0.01, metal=None, extra_edges=()):
    """basecolor = blend(c1, c2, mask); optional height -> normal, metallic."""
    nodes = [N("c1", "uniform-color", {"color": c1}), N("c2", "uniform-color", {"color": c2}),
             *mask_nodes,
             N("base", "blend", {"opacity": [opacity]}),
             N("rough", "uniform-gray", {"value": [rough]})]
    edges = [("c1", "base", 0), ("c2", "base", 1), (mask_id, "base", 2), *extra_edges]
    outputs = {"basecolor": "base", "roughness": "rough"}
    if height is None:
        nodes.append(FLAT)
        outputs["normal"] = "flat"
    else:
        nodes.append(N("bump", "normal-from-height", {"intensity": [bump]}))
        edges.append((height, "bump", 0))
        outputs["normal"] = "bump"
    if metal is not None:
        nodes.append(N("metal", "uniform-gray", {"value": [metal]}))
        outputs["metallic"] = "metal"
    return MaterialGraph(nodes, edges, outputs, name)


def library():
    mats = []
    # fabric
    mats.append(("fabric-denim", "fabric", two_tone(
        "fabric-denim", [0.12, 0.2, 0.42], [0.38, 0.48, 0.72],
        [N("weave", "checker", options={"cells": 32})], "weave", 0.85,
        opacity=0.7, height="weave", bump=0.004)))
    mats.append(("fabric-felt", "fabric", two_tone(
        "fabric-felt", [0.58, 0.1, 0.12], [0.32, 0.05, 0.08],
        [N("fuzz", "fbm-noise", {"amplitude": [0.9], "roughness": [0.6]},
           {"scale": 16, "octaves": 3, "seed": 11}, fixed={"roughness"})],
        "fuzz", 0.9, opacity=0.8, height="fuzz", bump=0.01)))
    # wood
    grain = lambda count, seed: [
        N("rings", "stripes", {"phase": [0.2]}, {"count": count, "axis": "v"}),
        N("warpn", "fbm-noise", {"amplitude": [0.9], "roughness": [0.5]},
          {"scale": 4, "octaves": 3, "seed": seed}, fixed={"roughness"}),
        N("grain", "directional-warp", {"intensity": [0.05], "angle": [0.25]}, fixed={"angle"}),
    ]
    gedges = [("rings", "grain", 0), ("warpn", "grain", 1)]
    mats.append(("wood-oak", "wood", two_tone(
        "wood-oak", [0.62, 0.44, 0.24], [0.4, 0.24, 0.11], grain(10, 21), "grain", 0.6,
        opacity=0.85, height="grain", bump=0.003, extra_edges=gedges)))
    mats.append(("wood-walnut", "wood", two_tone(
        "wood-walnut", [0.33, 0.2, 0.12], [0.18, 0.1, 0.06], grain(18, 22), "grain", 0.5,
        opacity=0.9, height="grain", bump=0.003, extra_edges=gedges)))
    # metal
    mats.append(("metal-brushed", "metal", two_tone(
        "metal-brushed", [0.56, 0.57, 0.6], [0.78, 0.79, 0.82],
        [N("brush", "fbm-noise", {"amplitude": [0.8], "roughness": [0.7]},
           {"scale": 32, "octaves": 2, "seed": 31}, fixed={"roughness"})],
        "brush", 0.35, opacity=0.6, metal=0.95)))
    mats.append(("metal-copper", "metal", two_tone(
        "metal-copper", [0.78, 0.45, 0.3], [0.36, 0.5, 0.42],
        [N("patina", "perlin-noise", {"amplitude": [0.9]}, {"scale": 8, "seed": 32})],
        "patina", 0.3, opacity=0.35, metal=0.9)))
    # bricks: mortar colour c1, brick colour c2 where the brick mask is 1
    bricks = lambda rows, cols: [N("bricks", "brick", {"mortar": [0.02], "bevel": [0.004]},
                                   {"rows": rows, "cols": cols}, fixed={"bevel"})]
    mats.append(("bricks-red", "bricks", two_tone(
        "bricks-red", [0.72, 0.7, 0.64], [0.55, 0.2, 0.13], bricks(8, 4), "bricks", 0.85,
        height="bricks", bump=0.01)))
    mats.append(("bricks-stone", "bricks", two_tone(
        "bricks-stone", [0.2, 0.2, 0.21], [0.5, 0.5, 0.52], bricks(6, 3), "bricks", 0.8,
        height="bricks", bump=0.015)))
    # plastic
    mats.append(("plastic-green", "plastic", two_tone(
        "plastic-green", [0.1, 0.55, 0.22], [0.1, 0.45, 0.2],
        [N("speck", "perlin-noise", {"amplitude": [0.6]}, {"scale": 16, "seed": 41})],
        "speck", 0.25, opacity=0.3)))
    mats.append(("plastic-yellow", "plastic", two_tone(
        "plastic-yellow", [0.88, 0.76, 0.16], [0.7, 0.6, 0.1],
        [N("speck", "perlin-noise", {"amplitude": [0.8]}, {"scale": 32, "seed": 42})],
        "speck", 0.45, opacity=0.5, height="speck", bump=0.002)))
    # marble: thin dark veins from a warped stripe pattern
    vein = [
        N("st", "stripes", {"phase": [0.1]}, {"count": 3, "axis": "u"}),
        N("vn", "fbm-noise", {"amplitude": [1.0], "roughness": [0.55]},
          {"scale": 4, "octaves": 4, "seed": 51}, fixed={"roughness"}),
        N("warp", "directional-warp", {"intensity": [0.08], "angle": [0.1]}, fixed={"angle"}),
        N("veins", "levels", {"in_low": [0.0], "in_high": [0.6], "gamma": [4.0]},
          fixed={"in_low", "out_low", "out_high"}),
        N("vinv", "invert", {"amount": [1.0]}, fixed={"amount"}),
    ]
    vedges = [("st", "warp", 0), ("vn", "warp", 1), ("warp", "veins", 0), ("veins", "vinv", 0)]
    mats.append(("marble-white", "marble", two_tone(
        "marble-white", [0.92, 0.91, 0.88], [0.42, 0.43, 0.48], vein, "vinv", 0.2,
        opacity=0.8, extra_edges=vedges)))
    mats.append(("leather-brown", "leather", two_tone(
        "leather-brown", [0.4, 0.24, 0.15], [0.22, 0.12, 0.07],
        [N("pores", "perlin-noise", {"amplitude": [1.0]}, {"scale": 32, "seed": 61})],
        "pores", 0.55, opacity=0.7, height="pores", bump=0.02)))
    return mats


def main(out=OUT):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for mid, cat, g in library():
        g.validate()
        save_graph(g, out / f"{mid}.json")
        entries.append({"id": mid, "category": cat, "graph": f"{mid}.json"})
    man = {"format": "texpro-library/1", "materials": entries}
    (out / "manifest.json").write_text(json.dumps(man, indent=2) + "\n", "utf-8")


if __name__ == "__main__":
    main(*sys.argv[1:])
