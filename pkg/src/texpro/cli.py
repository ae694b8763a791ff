"""Command-line pipeline: select-views, match, optimize, export, pipeline."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from texpro import __version__
from texpro.camsel import assign_part_view, coverage_table, sample_views, select_views
from texpro.config import ConfigError, PipelineConfig, check_export_resolution, load_config
from texpro.imageio import encode_png, read_mask, read_png
from texpro.maskops import MaskKind, align, bbox_crop, fallback_external, mask_filename, smooth
from texpro.matgraph import GraphError, MaterialGraph, evaluate
from texpro.matmatch import (
    AgentError, LiveAgent, MatchError, MockAgent, build_prompt_image, build_prompt_text,
    calibrated_extractor, load_library, match_material, query_agent,
)
from texpro.optim import (
    LossWeights, NumericError, OptimConfig, Problem, ViewBundle, run_two_stage, total_loss,
    trace_to_csv,
)
from texpro.render import Camera, MeshError, ShadingSetup, build_scene_layout, constant_maps, load_obj
from texpro.render.raster import rasterize, render_conditions, render_part_mask
from texpro.render.shading import shade

log = logging.getLogger("texpro")

EXIT_OK, EXIT_INPUT, EXIT_AGENT, EXIT_NUMERIC = 0, 2, 3, 4
STAGES = ("select-views", "match", "optimize", "export")
MANIFEST = "manifest.json"
RUN_FORMAT = "texpro-run/1"


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# output directory + manifest
# ---------------------------------------------------------------------------


class Run:
    """Output directory whose ``manifest.json`` inventories every emitted file.

    Files are owned by the stage that wrote them; rerunning a stage drops its
    own files and those of every later stage first, so no stale outputs stay
    behind.
    """

    def __init__(self, cfg: PipelineConfig, config_root: Path | None = None):
        self.cfg = cfg
        self.dir = Path(cfg.output)
        self.root = config_root
        path = self.dir / MANIFEST
        if path.exists():
            try:
                self.manifest = json.loads(path.read_text("utf-8"))
            except json.JSONDecodeError as exc:
                raise InputError(f"corrupt run manifest {path}: {exc}") from None
        else:
            self.manifest = {"format": RUN_FORMAT, "stages": {}, "parts": []}

    @property
    def stages(self) -> dict:
        return self.manifest.setdefault("stages", {})

    def begin(self, stage: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        for s in STAGES[STAGES.index(stage):]:
            for name in self.stages.pop(s, {}).get("files", []):
                (self.dir / name).unlink(missing_ok=True)
        self.stages[stage] = {"status": "running", "files": []}

    def require(self, stage: str) -> dict:
        info = self.stages.get(stage)
        if not info or info.get("status") != "ok":
            raise InputError(f"stage {stage!r} has not completed in {self.dir}; run it first")
        return info

    def write(self, stage: str, name: str, data) -> Path:
        path = self.dir / name
        if isinstance(data, str):
            data = data.encode("utf-8")
        path.write_bytes(data)
        files = self.stages[stage]["files"]
        if name not in files:
            files.append(name)
        return path

    def finish(self, stage: str, status: str = "ok") -> None:
        self.stages[stage]["status"] = status
        self.save()

    def save(self) -> None:
        m = self.manifest
        m["format"] = RUN_FORMAT
        m["version"] = __version__
        m["config"] = self.cfg.snapshot(self.root)
        m["files"] = sorted({f for s in self.stages.values() for f in s.get("files", [])})
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", "utf-8")

    def part(self, pid: int) -> dict:
        for rec in self.manifest["parts"]:
            if rec["part"] == pid:
                return rec
        raise InputError(f"part {pid} missing from manifest")


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def _mesh(cfg: PipelineConfig):
    return load_obj(cfg.mesh)


def _png(img, bits=8) -> bytes:
    return encode_png(img, bits)


def _read_image(path: Path, what: str) -> np.ndarray:
    try:
        img = read_png(path)
    except ValueError as exc:
        raise InputError(f"{what}: {exc}") from None
    return np.repeat(img[None], 3, axis=0) if img.ndim == 2 else img


def _read_mask(path: Path, what: str, shape) -> np.ndarray:
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    try:
        m = read_mask(path)
    except ValueError as exc:
        raise InputError(f"{what}: {exc}") from None
    if m.shape != tuple(shape):
        raise InputError(f"{what} {path} is {m.shape}, expected {tuple(shape)}")
    return m


def load_reference(cfg: PipelineConfig, view: int, resolution: int) -> np.ndarray:
    path = cfg.references.get(view)
    if path is None:
        raise InputError(f"no reference image configured for selected view {view} "
                         f"(add v{view} = <png> under [references])")
    if not Path(path).exists():
        raise InputError(f"reference image for view {view} not found: {path}")
    img = _read_image(Path(path), f"reference for view {view}")
    if img.shape[1:] != (resolution, resolution):
        raise InputError(f"reference for view {view} is {img.shape[2]}x{img.shape[1]}, "
                         f"expected {resolution}x{resolution}")
    return img


def cameras_text(cams: dict[int, Camera]) -> str:
    head = "# index px py pz tx ty tz ux uy uz fov_deg\n"
    return head + "".join(cams[i].to_line(i) + "\n" for i in sorted(cams))


def read_cameras(path: Path, resolution: int) -> dict[int, Camera]:
    cams = {}
    try:
        lines = Path(path).read_text("utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read cameras: {exc}") from None
    for line in lines:
        tok = line.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) != 11:
            raise InputError(f"{path}: camera line needs 11 fields, got {len(tok)}")
        v = [float(t) for t in tok[1:]]
        cams[int(tok[0])] = Camera(v[0:3], v[3:6], v[6:9], v[9], resolution)
    return cams


def lights_text(intensities) -> str:
    rows = np.asarray(intensities).reshape(-1, 3)
    head = "# index r g b  (0-3 wall lights, 4 overhead; linear radiance)\n"
    return head + "".join(f"{k} " + " ".join(f"{x:.9g}" for x in row) + "\n"
                          for k, row in enumerate(rows))


def reinhard(img) -> np.ndarray:
    x = np.maximum(np.asarray(img, np.float64), 0.0)
    return x / (1.0 + x)


def make_backend(cfg: PipelineConfig, mock_file=None):
    if mock_file is not None or cfg.agent.backend == "mock":
        path = Path(mock_file) if mock_file is not None else cfg.agent.mock_file
        if path is None:
            raise ConfigError("mock agent backend needs [agent] mock_file or --mock-agent")
        if not path.exists():
            raise InputError(f"mock agent fixture not found: {path}")
        return MockAgent.from_file(path)
    if not cfg.agent.endpoint:
        raise ConfigError("live agent backend needs [agent] endpoint")
    return LiveAgent(cfg.agent.endpoint, cfg.agent.model, retries=cfg.agent.retries,
                     timeout=cfg.agent.timeout)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def plan_views(cfg: PipelineConfig, mesh):
    """Candidate rings, coverage table, selection and part -> view assignment."""
    lo, hi = mesh.bbox()
    dist = cfg.distance_factor * float(np.linalg.norm(hi - lo))
    views = sample_views(*cfg.elevations, cfg.n_views, dist, (lo + hi) / 2, cfg.fov,
                         cfg.view_resolution)
    table = coverage_table(mesh, views)
    sel = select_views(table, views.front_index, cfg.threshold)
    return views, table, sel, assign_part_view(table, sel.views)


def cmd_select_views(cfg: PipelineConfig, run: Run) -> int:
    mesh = _mesh(cfg)
    run.begin("select-views")
    views, table, sel, assign = plan_views(cfg, mesh)
    cams = {v: views.cameras[v] for v in sel.views}
    run.write("select-views", "cameras.txt", cameras_text(cams))
    for v, cam in cams.items():
        gb = rasterize(mesh, None, cam)
        depth, normal = render_conditions(mesh, cam, gb)
        run.write("select-views", f"depth_v{v}.png", _png(depth, 16))
        run.write("select-views", f"normal_v{v}.png", _png(np.transpose(normal, (2, 0, 1)), 8))
        for p in range(mesh.n_parts):
            m = render_part_mask(mesh, cam, p, gb)
            run.write("select-views", mask_filename(v, p, MaskKind.RENDERED), _png(m.astype(float)))
    run.manifest["views"] = {
        "selected": sel.views, "front": sel.front, "step1": sel.step1, "step2": sel.step2,
        "resolution": cfg.view_resolution, "coverage": table.tolist(),
    }
    run.manifest["parts"] = [
        {"part": p, "name": mesh.part_names[p], "view": assign[p],
         "status": "uncoverable" if p in sel.uncoverable else "pending",
         "ranking": None, "material": None, "final_loss": None}
        for p in range(mesh.n_parts)
    ]
    run.finish("select-views")
    print("selected views: " + " ".join(map(str, sel.views)))
    return EXIT_OK


def _white_preview(mesh, layout, cam) -> np.ndarray:
    setup = ShadingSetup(mesh, layout, cam)
    white = {p: constant_maps((1.0, 1.0, 1.0)) for p in range(mesh.n_parts)}
    return shade(setup, white, layout.intensities()).data


def cmd_match(cfg: PipelineConfig, run: Run, mock_file=None) -> int:
    run.require("select-views")
    views = run.manifest["views"]
    res = views["resolution"]
    try:
        library = load_library(cfg.library, seed=cfg.match_seed)
    except (MatchError, GraphError, OSError) as exc:
        raise InputError(str(exc)) from None
    template = None
    if cfg.prompt_template is not None:
        try:
            template = Path(cfg.prompt_template).read_text("utf-8")
        except OSError as exc:
            raise InputError(f"cannot read prompt template: {exc}") from None
    text = build_prompt_text(cfg.object_name, template)
    backend = make_backend(cfg, mock_file)
    mesh = _mesh(cfg)
    run.begin("match")
    for rec in run.manifest["parts"]:
        rec.update(ranking=None, material=None, final_loss=None)
        rec.pop("error", None)
        if rec["status"] != "uncoverable":
            rec["status"] = "pending"

    run.write("match", "prompt.txt", text)
    extractor = calibrated_extractor(library, seed=cfg.match_seed)
    layout = None
    cams = read_cameras(run.dir / "cameras.txt", res)
    for rec in run.manifest["parts"]:
        if rec["status"] == "uncoverable":
            continue
        p, v = rec["part"], rec["view"]
        ref = load_reference(cfg, v, res)
        rendered = _read_mask(run.dir / mask_filename(v, p, MaskKind.RENDERED),
                              "rendered mask", (res, res))
        ext_name = mask_filename(v, p, MaskKind.EXTERNAL)
        ext_path = Path(cfg.masks) / ext_name if cfg.masks is not None else None
        if ext_path is not None and ext_path.exists():
            external = _read_mask(ext_path, "external mask", (res, res))
        elif cfg.mask_fallback:
            if layout is None:
                lo, hi = mesh.bbox()
                layout = build_scene_layout(lo, hi)
            external = fallback_external(ref, _white_preview(mesh, layout, cams[v]), rendered)
        else:
            raise InputError(f"external mask {ext_name} missing"
                             + (f" from {cfg.masks}" if cfg.masks else "")
                             + " and mask fallback is disabled")
        run.write("match", ext_name, _png(np.asarray(external, float)))
        aligned = align(rendered, smooth(external, rendered, cfg.window, cfg.radius, cfg.beta))
        if not aligned.any():
            raise InputError(f"aligned mask for part {p} in view {v} is empty")
        run.write("match", mask_filename(v, p, MaskKind.ALIGNED), _png(aligned.astype(float)))
        prompt = build_prompt_image(ref, aligned)
        run.write("match", f"prompt_p{p}.png", _png(prompt))
        try:
            ranking = query_agent(prompt, text, backend, part=p)
        except AgentError as exc:
            rec.update(status="agent-error", error=str(exc))
            for other in run.manifest["parts"]:
                if other["status"] == "pending":
                    other["status"] = "not-run"
            run.finish("match", "failed")
            raise
        rec["ranking"] = list(ranking)
        mcrop, icrop, _ = bbox_crop(aligned, ref)
        try:
            result = match_material(library, ranking, icrop, mcrop, cfg.alpha, cfg.K,
                                    extractor, cfg.match_seed)
        except MatchError as exc:
            rec.update(status="match-error", error=str(exc))
            run.finish("match", "failed")
            raise InputError(f"part {p}: {exc}") from None
        rec.update(status="matched", material=result.record.id,
                   scores={k: float(f"{s:.9g}") for k, s in result.scores.items()})
        print(f"part {p} ({rec['name']}): {result.record.id}")
    run.finish("match")
    return EXIT_OK


def _library_graphs(cfg: PipelineConfig, ids: dict[int, str]):
    try:
        library = {r.id: r for r in load_library(cfg.library, seed=cfg.match_seed)}
    except (MatchError, GraphError, OSError) as exc:
        raise InputError(str(exc)) from None
    missing = sorted(set(ids.values()) - set(library))
    if missing:
        raise InputError(f"matched materials {missing} are not in the library")
    return {p: library[m].graph.copy() for p, m in ids.items()}, list(library.values())


def cmd_optimize(cfg: PipelineConfig, run: Run) -> int:
    run.require("match")
    parts = [r for r in run.manifest["parts"] if r["status"] != "uncoverable"]
    if any(r["status"] != "matched" for r in parts):
        raise InputError("manifest has unmatched parts; rerun match")
    res = run.manifest["views"]["resolution"]
    mesh = _mesh(cfg)
    graphs, library = _library_graphs(cfg, {r["part"]: r["material"] for r in parts})
    lo, hi = mesh.bbox()
    layout = build_scene_layout(lo, hi)
    cams = read_cameras(run.dir / "cameras.txt", res)
    bundles = []
    for v in sorted(cams):
        masks = {r["part"]: _read_mask(run.dir / mask_filename(v, r["part"], MaskKind.ALIGNED),
                                       "aligned mask", (res, res))
                 for r in parts if r["view"] == v}
        bundles.append(ViewBundle(v, load_reference(cfg, v, res), ShadingSetup(mesh, layout, cams[v]), masks))
    weights = LossWeights(*cfg.weights)
    extractor = calibrated_extractor(library, seed=cfg.match_seed)
    problem = Problem(graphs, bundles, layout.intensities(), weights, extractor,
                      cfg.texture_resolution, cfg.optim_seed, cfg.bounces)
    run.begin("optimize")
    config = OptimConfig(cfg.stage1, cfg.stage2, cfg.lr_theta, cfg.lr_light)
    try:
        result = run_two_stage(problem, config)
    except NumericError as exc:
        run.write("optimize", "trace.csv", trace_to_csv(exc.trace))
        run.stages["optimize"]["error"] = str(exc)
        run.finish("optimize", "failed")
        raise
    run.write("optimize", "trace.csv", result.trace_csv())
    run.write("optimize", "lights.txt", lights_text(result.intensities))
    for p, g in sorted(result.graphs.items()):
        run.write("optimize", f"p{p}_graph.json", g.dumps())

    # per-part loss: mask terms only, on the part's own view
    maps, I = problem.maps(result.theta), problem.lights(result.phi)
    part_w = LossWeights(0.0, weights.lambda2, weights.lambda3, weights.lambda4)
    renders = problem.render(result.theta, result.phi)
    for b, rendered in zip(bundles, renders):
        linear = shade(b.setup, maps, I, cfg.bounces)
        run.write("optimize", f"preview_v{b.view}.png", _png(reinhard(linear.data)))
        for p, m in b.masks.items():
            single = ViewBundle(b.view, b.reference, b.setup, {p: m})
            loss, _ = total_loss([rendered], [single], part_w, extractor)
            run.part(p)["final_loss"] = float(f"{loss.item():.9g}")
    run.manifest["lights"] = np.round(result.intensities, 9).tolist()
    run.manifest["texture_seed"] = cfg.optim_seed
    run.finish("optimize")
    print(f"final loss {result.trace[-1]['total']:.6g}" if result.trace else "no iterations run")
    return EXIT_OK


def cmd_export(cfg: PipelineConfig, run: Run, resolution: int | None = None) -> int:
    n = cfg.export_resolution if resolution is None else int(resolution)
    check_export_resolution(n)
    run.require("optimize")
    seed = run.manifest.get("texture_seed", cfg.optim_seed)
    graphs = {}
    for rec in run.manifest["parts"]:
        if rec["status"] != "matched":
            continue
        p = rec["part"]
        try:
            graphs[p] = MaterialGraph.from_dict(json.loads((run.dir / f"p{p}_graph.json").read_text("utf-8")))
        except (OSError, json.JSONDecodeError, GraphError) as exc:
            raise InputError(f"optimized graph for part {p}: {exc}") from None
    run.begin("export")
    for p, g in sorted(graphs.items()):
        maps = evaluate(g, n, seed)
        for name, t in maps.channels().items():
            run.write("export", f"p{p}_{name}.png", _png(t.data, 16))
    run.manifest["export_resolution"] = n
    run.finish("export")
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig, run: Run, mock_file=None) -> int:
    for step in (lambda: cmd_select_views(cfg, run), lambda: cmd_match(cfg, run, mock_file),
                 lambda: cmd_optimize(cfg, run), lambda: cmd_export(cfg, run)):
        code = step()
        if code != EXIT_OK:
            return code
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="texpro", description=__doc__)
    ap.add_argument("--version", action="version", version=f"texpro {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("select-views", "match", "optimize", "export", "pipeline"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="INI pipeline config")
        sp.add_argument("--seed", type=int, default=None, help="override matching and optimization seeds")
        sp.add_argument("--mock-agent", type=Path, default=None, dest="mock_agent",
                        help="JSON rankings fixture; forces the offline agent")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def run_command(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    run = Run(cfg, Path(args.config).resolve().parent)
    try:
        return _dispatch(args, cfg, run)
    finally:
        # a stage that died midway still inventories what it wrote
        running = [s for s, info in run.stages.items() if info.get("status") == "running"]
        for s in running:
            run.stages[s]["status"] = "failed"
        if running:
            run.save()


def _dispatch(args, cfg, run) -> int:
    cmd = args.command
    if cmd == "select-views":
        return cmd_select_views(cfg, run)
    if cmd == "match":
        return cmd_match(cfg, run, args.mock_agent)
    if cmd == "optimize":
        return cmd_optimize(cfg, run)
    if cmd == "export":
        return cmd_export(cfg, run)
    return cmd_pipeline(cfg, run, args.mock_agent)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except (ConfigError, InputError, MeshError, GraphError, OSError) as exc:
        print(f"texpro: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AgentError as exc:
        print(f"texpro: agent error: {exc}", file=sys.stderr)
        return EXIT_AGENT
    except NumericError as exc:
        print(f"texpro: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
