"""Synthetic demo assets: a two-part mesh, references and noisy external masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from texpro.render.mesh import Mesh, box_triangles, mesh_from_triangles


def two_box_mesh() -> Mesh:
    """A 1.0 x 0.5 x 1.0 base with a 0.6 x 0.5 x 0.6 block on top; parts 0 and 1."""
    tris = np.concatenate([box_triangles([-0.5, 0.0, -0.5], [0.5, 0.5, 0.5]),
                           box_triangles([-0.3, 0.5, -0.3], [0.3, 1.0, 0.3])])
    return mesh_from_triangles(tris, [0] * 12 + [1] * 12, part_names=["base", "top"])


FIXTURE_MATERIALS = {0: "wood-oak", 1: "fabric-felt"}
FIXTURE_RANKINGS = {"0": ["wood", "fabric", "leather"], "1": ["fabric", "leather", "wood"]}

_CONFIG = """\
[input]
mesh = mesh.obj
object_name = {object_name}
masks = masks
mask_fallback = false

[references]
{references}

[agent]
backend = mock
mock_file = agent.json

[output]
dir = {output}

[camsel]
resolution = {resolution}
threshold = {threshold}

[match]
K = 4
seed = {seed}

[optim]
stage1 = {stage1}
stage2 = {stage2}
resolution = 64
seed = {seed}

[export]
resolution = 64
"""


def noisy_mask(bits, rng: np.random.Generator, flip: float = 0.02, shift: int = 1) -> np.ndarray:
    """Rendered mask shifted by ``shift`` columns with a fraction ``flip`` of pixels toggled."""
    m = np.roll(np.asarray(bits, dtype=bool), shift, axis=1)
    return m ^ (rng.random(m.shape) < flip)


def write_fixture_assets(root, *, seed: int = 0, resolution: int = 64, threshold: int = 400,
                         stage1: int = 4, stage2: int = 4, output: str = "out",
                         materials: dict[int, str] | None = None) -> Path:
    """Mesh, references, noisy external masks, mock rankings and an INI config.

    References are renders of known library materials under the default scene
    at the views the pipeline will select. Returns the config path.
    """
    from texpro.cli import plan_views
    from texpro.config import PipelineConfig
    from texpro.imageio import write_mask, write_png
    from texpro.maskops import MaskKind, mask_filename
    from texpro.matmatch import load_library
    from texpro.matgraph import evaluate
    from texpro.optim import soft_saturate
    from texpro.render.mesh import save_obj
    from texpro.render.raster import rasterize, render_part_mask
    from texpro.render.scene import build_scene_layout
    from texpro.render.shading import ShadingSetup, shade

    import json

    root = Path(root)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "refs").mkdir(exist_ok=True)
    mesh = two_box_mesh()
    save_obj(mesh, root / "mesh.obj")
    mats = dict(FIXTURE_MATERIALS if materials is None else materials)
    lib = {r.id: r for r in load_library()}
    maps = {p: evaluate(lib[m].graph, 64) for p, m in mats.items()}

    cfg = PipelineConfig(root / "mesh.obj", {}, root / output, view_resolution=resolution,
                         threshold=threshold)
    views, _, sel, _ = plan_views(cfg, mesh)
    lo, hi = mesh.bbox()
    layout = build_scene_layout(lo, hi)
    rng = np.random.default_rng(seed)
    refs = []
    for v in sel.views:
        cam = views.cameras[v]
        setup = ShadingSetup(mesh, layout, cam)
        img = soft_saturate(shade(setup, maps, layout.intensities())).data
        write_png(root / "refs" / f"ref_v{v}.png", img)
        refs.append(f"v{v} = refs/ref_v{v}.png")
        gb = rasterize(mesh, None, cam)
        for p in range(mesh.n_parts):
            m = render_part_mask(mesh, cam, p, gb)
            write_mask(root / "masks" / mask_filename(v, p, MaskKind.EXTERNAL), noisy_mask(m, rng))
    (root / "agent.json").write_text(json.dumps(FIXTURE_RANKINGS, indent=2) + "\n", "utf-8")
    path = root / "config.ini"
    path.write_text(_CONFIG.format(object_name="two-tier side table", references="\n".join(refs),
                                   output=output, resolution=resolution, threshold=threshold,
                                   seed=seed, stage1=stage1, stage2=stage2), "utf-8")
    return path


if __name__ == "__main__":
    import sys

    if len(sys.argv) != 2:
        sys.exit("usage: python -m texpro.fixtures <directory>")
    print(write_fixture_assets(sys.argv[1]))
