import configparser
import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import png
import pytest

from texpro import cli
from texpro.fixtures import write_fixture_assets
from texpro.imageio import read_png
from texpro.optim import NumericError, TRACE_COLUMNS
from texpro.render.mesh import box_triangles, mesh_from_triangles, save_obj

STAGE1, STAGE2 = 3, 2


def set_options(config: Path, out: Path | None = None, **sections) -> Path:
    """Copy of ``config`` with {section: {key: value}} overrides (None removes the key)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(config)
    for sec, kv in sections.items():
        if not cp.has_section(sec):
            cp.add_section(sec)
        for k, v in kv.items():
            if v is None:
                cp.remove_option(sec, k)
            else:
                cp.set(sec, k, str(v))
    out = out or config.with_name(f"cfg_{len(list(config.parent.glob('cfg_*')))}.ini")
    with open(out, "w") as fh:
        cp.write(fh)
    return out


def inventory_ok(out: Path) -> bool:
    man = json.loads((out / "manifest.json").read_text())
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    return on_disk == set(man["files"])


def tree_hash(out: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())}


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    root = tmp_path_factory.mktemp("assets")
    return write_fixture_assets(root, stage1=STAGE1, stage2=STAGE2)


@pytest.fixture(scope="module")
def done(assets):
    assert cli.main(["pipeline", "--config", str(assets)]) == 0
    return assets.parent / "out"


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def fresh(assets, name, **sections):
    """Config writing to its own output dir, so module-scoped runs stay untouched."""
    return set_options(assets, output={"dir": name}, **sections)


def clone_run(done, assets, name):
    shutil.copytree(done, assets.parent / name)
    return fresh(assets, name)


# -- pipeline outputs --------------------------------------------------------


def test_pipeline_inventory_has_no_orphans(done):
    assert inventory_ok(done)


def test_manifest_parts_and_matches(done):
    man = manifest(done)
    assert [r["part"] for r in man["parts"]] == [0, 1]
    assert {r["part"]: r["material"] for r in man["parts"]} == {0: "wood-oak", 1: "fabric-felt"}
    for r in man["parts"]:
        assert r["status"] == "matched"
        assert r["ranking"][0] in ("wood", "fabric")
        assert np.isfinite(r["final_loss"]) and r["final_loss"] >= 0
        assert r["view"] in man["views"]["selected"]
    assert man["version"] == cli.__version__
    assert man["config"]["mesh"] == "mesh.obj"


def test_select_views_outputs(done):
    man = manifest(done)
    views = man["views"]["selected"]
    assert man["views"]["front"] in views
    lines = [l for l in (done / "cameras.txt").read_text().splitlines() if not l.startswith("#")]
    assert [int(l.split()[0]) for l in lines] == views
    assert all(len(l.split()) == 11 for l in lines)
    for v in views:
        assert (done / f"depth_v{v}.png").exists() and (done / f"normal_v{v}.png").exists()
        for p in (0, 1):
            assert (done / f"mask_v{v}_p{p}_rendered.png").exists()


def test_optimize_outputs(done):
    man = manifest(done)
    rows = (done / "trace.csv").read_text().splitlines()
    assert rows[0].split(",") == list(TRACE_COLUMNS)
    assert len(rows) - 1 == STAGE1 + STAGE2
    lights = [l.split() for l in (done / "lights.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(lights) == 5 and all(len(l) == 4 for l in lights)
    for v in man["views"]["selected"]:
        img = read_png(done / f"preview_v{v}.png")
        assert img.shape == (3, 64, 64) and img.max() < 1.0  # Reinhard never reaches white


def test_export_maps_are_16bit(done):
    for p in (0, 1):
        for ch in ("basecolor", "normal", "roughness"):
            w, h, _, info = png.Reader(filename=str(done / f"p{p}_{ch}.png")).read()
            assert (w, h, info["bitdepth"]) == (64, 64, 16)
        assert not (done / f"p{p}_metallic.png").exists()  # neither graph binds metallic


def test_prompt_text_shared_images_distinct(done):
    text = (done / "prompt.txt").read_text()
    assert "two-tier side table" in text and "[object_name]" not in text
    assert (done / "prompt_p0.png").read_bytes() != (done / "prompt_p1.png").read_bytes()


def test_seed_override_recorded(assets, tmp_path):
    cfg = fresh(assets, "seeded")
    assert cli.main(["select-views", "--config", str(cfg), "--seed", "7"]) == 0
    snap = manifest(assets.parent / "seeded")["config"]
    assert snap["match_seed"] == snap["optim_seed"] == 7


# -- select-views ----------------------------------------------------------


def test_select_views_rerun_identical(assets):
    cfg = fresh(assets, "sv")
    out = assets.parent / "sv"
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    first = tree_hash(out)
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert tree_hash(out) == first


def test_single_part_mesh_selects_front_only(assets, tmp_path):
    mesh = mesh_from_triangles(box_triangles([-0.5, 0, -0.5], [0.5, 1, 0.5]), [0] * 12)
    save_obj(mesh, tmp_path / "box.obj")
    cfg = set_options(assets, tmp_path / "box.ini", input={"mesh": str(tmp_path / "box.obj")},
                      output={"dir": str(tmp_path / "boxout")}, camsel={"threshold": 100})
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    man = manifest(tmp_path / "boxout")
    assert man["views"]["selected"] == [man["views"]["front"]]
    assert len(list((tmp_path / "boxout").glob("mask_*_rendered.png"))) == 1


def test_unreadable_mesh_exit_2(assets, tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0\nf 1 2 3\n")
    cfg = set_options(assets, tmp_path / "bad.ini", input={"mesh": str(tmp_path / "bad.obj")})
    assert cli.main(["select-views", "--config", str(cfg)]) == 2
    cfg = set_options(assets, tmp_path / "none.ini", input={"mesh": str(tmp_path / "none.obj")})
    assert cli.main(["select-views", "--config", str(cfg)]) == 2


def test_bad_config_exit_2(assets, tmp_path):
    assert cli.main(["select-views", "--config", str(tmp_path / "missing.ini")]) == 2
    cfg = set_options(assets, tmp_path / "bad.ini", maskops={"beta": "1.5"})
    assert cli.main(["select-views", "--config", str(cfg)]) == 2
    cfg = set_options(assets, tmp_path / "inf.ini", optim={"weights": "1 1 inf 0.1"})
    assert cli.main(["select-views", "--config", str(cfg)]) == 2


# -- match -----------------------------------------------------------------


def test_missing_external_mask_without_fallback_exit_2(assets, tmp_path):
    (tmp_path / "nomasks").mkdir()
    cfg = fresh(assets, "nomask", input={"masks": str(tmp_path / "nomasks")})
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg)]) == 2
    assert inventory_ok(assets.parent / "nomask")


def test_fallback_mask_used_when_enabled(assets, tmp_path):
    (tmp_path / "nomasks").mkdir(exist_ok=True)
    cfg = fresh(assets, "fallback", input={"masks": str(tmp_path / "nomasks"), "mask_fallback": "true"})
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg)]) == 0
    out = assets.parent / "fallback"
    man = manifest(out)
    for r in man["parts"]:
        assert (out / f"mask_v{r['view']}_p{r['part']}_external.png").exists()
        assert r["material"] is not None


def test_missing_reference_exit_2(assets):
    cfg = fresh(assets, "noref")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(cfg)
    cp.remove_section("references")
    with open(cfg, "w") as fh:
        cp.write(fh)
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg)]) == 2


def test_mock_singleton_library(assets, tmp_path):
    from texpro.matmatch import load_library, write_library

    felt = [r for r in load_library() if r.id == "fabric-felt"]
    write_library(felt, tmp_path / "lib")
    (tmp_path / "fabric.json").write_text(json.dumps({"default": ["fabric"]}))
    cfg = fresh(assets, "single", input={"library": str(tmp_path / "lib")})
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg), "--mock-agent", str(tmp_path / "fabric.json")]) == 0
    assert {r["material"] for r in manifest(assets.parent / "single")["parts"]} == {"fabric-felt"}


def test_agent_failure_exit_3_with_markers(assets, tmp_path):
    (tmp_path / "partial.json").write_text(json.dumps({"0": ["wood"]}))  # nothing for part 1
    cfg = fresh(assets, "agentfail")
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg), "--mock-agent", str(tmp_path / "partial.json")]) == 3
    out = assets.parent / "agentfail"
    man = manifest(out)
    status = {r["part"]: r["status"] for r in man["parts"]}
    assert status == {0: "matched", 1: "agent-error"}
    assert man["stages"]["match"]["status"] == "failed"
    assert "error" in man["parts"][1]
    assert inventory_ok(out)
    # downstream refuses to run on a failed match
    assert cli.main(["optimize", "--config", str(cfg)]) == 2


def test_live_agent_unreachable_exit_3(assets):
    cfg = fresh(assets, "live", agent={"backend": "live", "endpoint": "http://127.0.0.1:9/v1",
                                       "model": "m", "retries": 1, "timeout": 2})
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg)]) == 3
    assert manifest(assets.parent / "live")["parts"][0]["status"] == "agent-error"


def test_optimize_before_match_exit_2(assets):
    cfg = fresh(assets, "early")
    assert cli.main(["select-views", "--config", str(cfg)]) == 0
    assert cli.main(["optimize", "--config", str(cfg)]) == 2


# -- optimize --------------------------------------------------------------


def test_zero_iterations_previews_initial_materials(done, assets):
    cfg = clone_run(done, assets, "zero")
    cfg = set_options(cfg, cfg, optim={"stage1": 0, "stage2": 0})
    assert cli.main(["optimize", "--config", str(cfg)]) == 0
    out = assets.parent / "zero"
    assert (out / "trace.csv").read_text().splitlines() == [",".join(TRACE_COLUMNS)]
    from texpro.matgraph import MaterialGraph
    from texpro.matmatch import load_library

    lib = {r.id: r for r in load_library()}
    for r in manifest(out)["parts"]:
        got = MaterialGraph.from_dict(json.loads((out / f"p{r['part']}_graph.json").read_text()))
        ref = lib[r["material"]].graph
        assert [n.id for n in got.nodes] == [n.id for n in ref.nodes]
        for a, b in zip(got.nodes, ref.nodes):
            for k in b.params:
                np.testing.assert_allclose(a.params[k], b.params[k], rtol=0, atol=1e-12)
    assert inventory_ok(out)
    # export outputs from before were invalidated by the rerun
    assert not (out / "p0_basecolor.png").exists()


def test_numeric_failure_exit_4(done, assets, monkeypatch):
    cfg = clone_run(done, assets, "nan")
    partial = [{"iteration": i, "stage": 1, "total": 1.0, "resized": 0.1, "pixel": 0.2,
                "stat": 0.3, "gram": 0.4} for i in range(2)]

    def boom(problem, config):
        raise NumericError(2, "pixel", partial)

    monkeypatch.setattr(cli, "run_two_stage", boom)
    assert cli.main(["optimize", "--config", str(cfg)]) == 4
    out = assets.parent / "nan"
    assert len((out / "trace.csv").read_text().splitlines()) == 3
    man = manifest(out)
    assert man["stages"]["optimize"]["status"] == "failed"
    assert "iteration 2" in man["stages"]["optimize"]["error"]
    assert inventory_ok(out)


# -- export ----------------------------------------------------------------


@pytest.mark.parametrize("res", [32, 100, 4096])
def test_export_unsupported_resolution_exit_2(done, assets, res):
    cfg = clone_run(done, assets, f"badres{res}")
    cfg = set_options(cfg, cfg, export={"resolution": res})
    assert cli.main(["export", "--config", str(cfg)]) == 2


def test_export_resolution_independent_and_deterministic(done, assets):
    cfg = clone_run(done, assets, "multi")
    out = assets.parent / "multi"
    for res in (128, 256):
        c = set_options(cfg, cfg, export={"resolution": res})
        assert cli.main(["export", "--config", str(c)]) == 0
        assert read_png(out / "p0_basecolor.png").shape == (3, res, res)
        assert inventory_ok(out)
    first = tree_hash(out)
    assert cli.main(["export", "--config", str(cfg)]) == 0
    assert tree_hash(out) == first


def test_uniform_color_material_exports_constant_map(done, assets, tmp_path):
    from texpro.matgraph import MaterialGraph, NodeInstance

    cfg = clone_run(done, assets, "const")
    out = assets.parent / "const"
    flat = MaterialGraph([NodeInstance("c", "uniform-color", {"color": [0.3, 0.5, 0.7]}),
                          NodeInstance("n", "uniform-color", {"color": [0.5, 0.5, 1.0]}),
                          NodeInstance("r", "uniform-gray", {"value": [0.4]})], [],
                         {"basecolor": "c", "normal": "n", "roughness": "r"}, name="flat")
    (out / "p0_graph.json").write_text(flat.dumps())
    assert cli.main(["export", "--config", str(cfg)]) == 0
    base = read_png(out / "p0_basecolor.png")
    assert np.ptp(base.reshape(3, -1), axis=1).max() == 0
    np.testing.assert_allclose(base[:, 0, 0], [0.3, 0.5, 0.7], atol=1 / 65535)
