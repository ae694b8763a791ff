"""Acceptance criteria 1-8, each reported as one PASS / FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""
import hashlib
import shutil
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from texpro import cli
from texpro import tensor as T
from texpro.camsel import select_views
from texpro.fixtures import two_box_mesh, write_fixture_assets
from texpro.maskops import align, components, filter_regions
from texpro.matgraph import evaluate, flatten_params
from texpro.matmatch import (
    CATEGORIES, AgentRanking, MaterialRecord, SCALES, calibrated_extractor, load_library,
    match_material,
)
from texpro.optim import (
    LossWeights, OptimConfig, Problem, ViewBundle, loss_gram, loss_pixel, loss_resized,
    loss_stat, run_two_stage, total_loss,
)
from texpro.render import ShadingSetup, build_scene_layout, front_camera, look_from_spherical, shade
from texpro.tensor import Tensor, backward

from gradcheck import numeric_grad, rel_error
from oracles import block_downsample, brute_force_min_cover, flood_fill_components, two_pass_stats

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------


def _primitive_errors() -> dict[str, float]:
    from test_tensor import CASES, _rand

    errs = {}
    for name, (fn, shapes) in sorted(CASES.items()):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        arrays = [_rand(rng, *s) for s in shapes]
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        weights = rng.normal(size=out.shape)
        backward(T.sum(out * weights))
        worst = 0.0
        for k, leaf in enumerate(leaves):
            def f(x, k=k):
                args = [Tensor(a) for a in arrays]
                args[k] = Tensor(x)
                return float((fn(*args).data * weights).sum())
            worst = max(worst, rel_error(leaf.grad, numeric_grad(f, arrays[k].copy(), 1e-4)))
        errs[name] = worst
    return errs


def _node_param_errors() -> dict[str, float]:
    from test_matgraph import _chain_graphs

    errs = {}
    for gi, g in enumerate(_chain_graphs()):
        theta, layout = flatten_params(g)
        rng = np.random.default_rng(gi)
        w = {ch: rng.normal(size=(3 if ch in ("basecolor", "normal") else 1, 64, 64))
             for ch in ("basecolor", "normal", "roughness", "metallic")}

        def loss(th):
            maps = evaluate(g, 64, seed=1, params=layout.param_tensors(th))
            return T.sum(T.stack([T.mean(t * w[ch]) for ch, t in maps.channels().items()]))

        leaf = Tensor(theta.data.copy(), requires_grad=True)
        backward(loss(leaf))
        num = numeric_grad(lambda x: float(loss(Tensor(x)).data), theta.data.copy(), 1e-4)
        for e in layout.entries:
            sl = slice(e.offset, e.offset + e.size)
            errs[f"{g.nodes[[n.id for n in g.nodes].index(e.node_id)].op}.{e.name}"] = \
                rel_error(leaf.grad[sl], num[sl])
    return errs


def _shading_errors():
    from test_render import _random_maps

    mesh = two_box_mesh()
    lo, hi = mesh.bbox()
    layout = build_scene_layout(lo, hi)
    setup = ShadingSetup(mesh, layout, front_camera(lo, hi, resolution=32))
    rng = np.random.default_rng(11)
    maps = {p: _random_maps(rng, grad=True) for p in range(2)}
    I0 = layout.intensities() * rng.uniform(0.5, 1.5, size=(5, 3))
    wimg = rng.normal(size=(3, 32, 32))

    def f_img():
        return float((shade(setup, maps, I0).data * wimg).sum())

    light = Tensor(I0.copy(), requires_grad=True)
    backward(T.sum(shade(setup, maps, light) * wimg))
    analytic = {(p, ch): getattr(maps[p], ch).grad.copy() for p in maps
                for ch in ("basecolor", "normal", "roughness", "metallic")}
    keys = sorted(analytic)
    texel_a, texel_n = [], []
    for _ in range(20):
        p, ch = keys[int(rng.integers(len(keys)))]
        img = getattr(maps[p], ch)
        idx = tuple(int(rng.integers(s)) for s in img.shape)
        texel_a.append(analytic[(p, ch)][idx])
        old = img.data[idx]
        img.data[idx] = old + 1e-4
        fp = f_img()
        img.data[idx] = old - 1e-4
        fm = f_img()
        img.data[idx] = old
        texel_n.append((fp - fm) / 2e-4)
    light_n = numeric_grad(lambda x: float((shade(setup, maps, x).data * wimg).sum()),
                           I0.copy(), 1e-4)
    return rel_error(texel_a, texel_n), rel_error(light.grad, light_n)


def test_criterion_1_gradient_suite():
    t0 = time.time()
    prim = _primitive_errors()
    nodes = _node_param_errors()
    texel, light = _shading_errors()
    dt = time.time() - t0
    worst_p = max(prim, key=prim.get)
    worst_n = max(nodes, key=nodes.get)
    from texpro.matgraph import node_library

    all_params = {f"{s.op_name}.{p.name}" for s in node_library() for p in s.params}
    ok = (max(prim.values()) < 1e-3 and max(nodes.values()) < 1e-3 and texel < 1e-3
          and light < 1e-3 and all_params <= set(nodes) and dt < 300)
    report(1, ok, f"{len(prim)} primitives (worst {worst_p} {prim[worst_p]:.1e}), "
                  f"{len(nodes)} node params (worst {worst_n} {nodes[worst_n]:.1e}), "
                  f"20 texels {texel:.1e}, 15 lights {light:.1e}, {dt:.0f}s")


# ---------------------------------------------------------------------------
# 2. synthetic inverse rendering
# ---------------------------------------------------------------------------

RECOVERY_MATERIALS = ["fabric-felt", "wood-oak", "metal-brushed", "bricks-red", "plastic-green"]
RECOVERY_RES = 128


def perturb(values, lo, hi, rng, frac=0.2):
    """values +/- frac x range, sign flipped where the step would reach a bound."""
    step = frac * (hi - lo)
    sign = rng.choice([-1.0, 1.0], size=values.size)
    out = values + sign * step
    bad = (out <= lo) | (out >= hi)
    out[bad] = values[bad] - sign[bad] * step[bad]
    return out


@pytest.fixture(scope="module")
def recovery_scene():
    mesh = two_box_mesh()
    lo, hi = mesh.bbox()
    layout = build_scene_layout(lo, hi)
    d = 2.5 * float(np.linalg.norm(hi - lo))
    cams = [look_from_spherical((lo + hi) / 2, d, 30, 0, resolution=RECOVERY_RES),
            look_from_spherical((lo + hi) / 2, d, 15, 135, resolution=RECOVERY_RES)]
    return mesh, layout, [ShadingSetup(mesh, layout, c) for c in cams]


def recover(material, scene, library, extractor, stage1=200, stage2=300, seed=0):
    mesh, layout, setups = scene
    g = library[material].graph
    graphs = {0: g.copy(), 1: g.copy()}
    draft = Problem(graphs, [ViewBundle(i, np.zeros((3, RECOVERY_RES, RECOVERY_RES)), s)
                             for i, s in enumerate(setups)], layout.intensities(), extractor=extractor)
    refs = [r.data for r in draft.render(draft.theta0, draft.phi0)]
    part = setups[0].gbuffer.image(setups[0].gbuffer.part_id)
    bundles = [ViewBundle(0, refs[0], setups[0], {0: part == 0, 1: part == 1}),
               ViewBundle(1, refs[1], setups[1], {})]
    P = Problem(graphs, bundles, layout.intensities(), extractor=extractor)
    lo = np.concatenate([P.layouts[p].bounds()[0] for p in P.parts])
    hi = np.concatenate([P.layouts[p].bounds()[1] for p in P.parts])
    true = np.concatenate([P.layouts[p].values(P.theta0[P.offsets[p]:P.offsets[p] + P.layouts[p].size])
                           for p in P.parts])
    th0 = T.inverse_soft_clamp(perturb(true, lo, hi, np.random.default_rng(seed)), lo, hi)
    res = run_two_stage(P, OptimConfig(stage1, stage2), theta0=th0)
    ratio = res.trace[-1]["total"] / res.trace[0]["total"]
    l1 = [float(np.abs(evaluate(res.graphs[p], 256).basecolor.data
                       - evaluate(graphs[p], 256).basecolor.data).mean()) for p in P.parts]
    return ratio, l1


@pytest.fixture(scope="module")
def library():
    return {r.id: r for r in load_library()}


@pytest.fixture(scope="module")
def extractor(library):
    return calibrated_extractor(list(library.values()))


def test_criterion_2_synthetic_recovery(recovery_scene, library, extractor):
    cats = {library[m].category for m in RECOVERY_MATERIALS}
    parts, ok = [], cats == {"fabric", "wood", "metal", "bricks", "plastic"}
    for m in RECOVERY_MATERIALS:
        t0 = time.time()
        ratio, l1 = recover(m, recovery_scene, library, extractor)
        dt = time.time() - t0
        good = ratio <= 0.1 and max(l1) < 0.05 and dt < 900
        ok &= good
        parts.append(f"{m} {'ok' if good else 'MISS'} (loss x{ratio:.3f}, L1 {max(l1):.3f}, {dt:.0f}s)")
        print(parts[-1], flush=True)
    report(2, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 3. self-matching
# ---------------------------------------------------------------------------


def _ellipse(h, w):
    yy, xx = np.mgrid[:h, :w]
    return ((yy + 0.5 - h / 2) / (h / 2)) ** 2 + ((xx + 0.5 - w / 2) / (w / 2)) ** 2 <= 1


def test_criterion_3_self_matching(library, extractor):
    lib = list(library.values())
    rng = np.random.default_rng(0)
    hits, trials, worst = 0, 0, {}
    for r in lib:
        h_r = 0
        for k in range(50):
            bh, bw = (int(v) for v in rng.integers(24, 65, 2))
            y, x = int(rng.integers(0, 512 - bh + 1)), int(rng.integers(0, 512 - bw + 1))
            crop = r.exemplars[512][:, y:y + bh, x:x + bw]
            others = [c for c in CATEGORIES if c != r.category]
            rng.shuffle(others)
            res = match_material(lib, AgentRanking((r.category, *others)), crop, _ellipse(bh, bw),
                                 extractor=extractor, seed=k)
            h_r += res.record.id == r.id
        hits += h_r
        trials += 50
        worst[r.id] = h_r / 50
    rate = hits / trials

    # equalized raw loss: identical exemplars under two categories
    flat = {s: np.full((3, s, s), 0.4) for s in SCALES}
    g = lib[0].graph
    a, b = MaterialRecord("a", "wood", g, flat), MaterialRecord("b", "metal", g, flat)
    crop, m = np.full((3, 32, 32), 0.55), np.ones((32, 32), bool)
    order_ok = True
    for first, second in (("metal", "wood"), ("wood", "metal")):
        for lib2 in ([a, b], [b, a]):
            res = match_material(lib2, AgentRanking((first, second)), crop, m, extractor=extractor)
            order_ok &= res.raw["a"] == res.raw["b"] and res.record.category == first
            ratio = res.scores[{"wood": "a", "metal": "b"}[second]] / res.scores[{"wood": "a", "metal": "b"}[first]]
            order_ok &= abs(ratio - 5 / 3) < 1e-12
    n_cat = len({r.category for r in lib})
    low = min(worst, key=worst.get)
    report(3, rate >= 0.9 and order_ok and len(lib) >= 10 and n_cat >= 4,
           f"top-1 {rate:.1%} over {trials} crops, {len(lib)} materials / {n_cat} categories "
           f"(lowest {low} {worst[low]:.0%}); order-1 wins on equal raw loss: {order_ok}")


# ---------------------------------------------------------------------------
# 4. camera selection
# ---------------------------------------------------------------------------


def test_criterion_4_camera_selection():
    rng = np.random.default_rng(4)
    card_ok = guard_ok = 0
    for _ in range(200):
        V, P = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        table = rng.integers(0, 1500, size=(V, P)) * (rng.uniform(size=(V, P)) > 0.3)
        front = int(rng.integers(V))
        sel = select_views(table, front, 500)
        best = table.max(axis=0)
        weak = [p for p in range(P) if table[front, p] < 500 and best[p] > 0]
        step1 = {int(np.argmax(table[:, p])) for p in weak if best[p] < 500}
        need = {p for p in weak if best[p] >= 500 and not any(table[v, p] >= 500 for v in step1)}
        sets = [{p for p in need if table[v, p] >= 500} for v in range(V)]
        card_ok += len(sel.step2) == brute_force_min_cover(need, sets)
        views = set(sel.views)
        guard_ok += front in views and all(
            best[p] == 0 or any(table[v, p] >= 500 for v in views) or int(np.argmax(table[:, p])) in views
            for p in range(P))
    report(4, card_ok == 200 and guard_ok == 200,
           f"step-2 size = brute-force minimum in {card_ok}/200; coverage guarantee in {guard_ok}/200")


# ---------------------------------------------------------------------------
# 5. masks
# ---------------------------------------------------------------------------


def test_criterion_5_mask_oracles():
    rng = np.random.default_rng(5)
    decide_ok = subset_ok = 0
    for _ in range(500):
        shape = (int(rng.integers(8, 25)), int(rng.integers(8, 25)))
        m = rng.uniform(size=shape) < rng.uniform(0.2, 0.7)
        r = rng.uniform(size=shape) < rng.uniform(0.2, 0.7)
        if not r.any():
            r[0, 0] = True
        cutoff = 0.5 * min(len(c) for c in flood_fill_components(r))
        want = np.zeros_like(m)
        for comp in flood_fill_components(m):
            if len(comp) >= cutoff:
                for y, x in comp:
                    want[y, x] = True
        decide_ok += np.array_equal(filter_regions(m, r, 0.5), want)
        a = align(r, m)
        subset_ok += not np.any(a & ~r) and not np.any(a & ~m)
    # boundary: P_r = 20 -> cutoff 10
    rendered = np.zeros((20, 20), bool)
    rendered[0:4, 0:5] = True
    edge = np.zeros((20, 20), bool)
    edge[10, 0:10] = True
    edge[15, 0:9] = True
    out = filter_regions(edge, rendered, 0.5)
    boundary = out[10].sum() == 10 and out[15].sum() == 0
    report(5, decide_ok == 500 and subset_ok == 500 and boundary,
           f"filter_regions = flood fill on {decide_ok}/500; align subset on {subset_ok}/500; "
           f"beta boundary (10 kept, 9 removed): {boundary}")


# ---------------------------------------------------------------------------
# 6. loss semantics
# ---------------------------------------------------------------------------


def _gram_oracle(r, i, m, extractor):
    r0, c0 = np.argwhere(m).min(axis=0)
    r1, c1 = np.argwhere(m).max(axis=0) + 1
    w = m[r0:r1, c0:c1]
    fr = extractor.features_fast(r[:, r0:r1, c0:c1] * w, np.float64)
    fi = extractor.features_fast(i[:, r0:r1, c0:c1] * w, np.float64)
    per = []
    for a, b in zip(fr, fi):
        A, B = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
        per.append(np.abs(A @ A.T / A.shape[1] - B @ B.T / B.shape[1]).mean())
    return float(np.mean(per))


def test_criterion_6_loss_semantics(extractor):
    rng = np.random.default_rng(6)
    worst = {"resized": 0.0, "pixel": 0.0, "stat": 0.0, "gram": 0.0}
    zero_ok = True
    for _ in range(10):
        H, W = int(rng.integers(3, 7)) * 8, int(rng.integers(3, 7)) * 8
        a, b = rng.uniform(size=(3, H, W)), rng.uniform(size=(3, H, W))
        m1 = np.zeros((H, W), bool)
        m1[2:H - 3, 1:W // 2] = True
        m2 = (rng.uniform(size=(H, W)) < 0.5) & ~m1
        masks = [m1, m2]
        want = {
            "resized": np.abs(block_downsample(a, 8) - block_downsample(b, 8)).mean(),
            "pixel": np.mean([np.abs(a - b)[:, m].mean() for m in masks]),
            "stat": np.mean([np.mean([abs(two_pass_stats(a[c][m])[0] - two_pass_stats(b[c][m])[0])
                                      + abs(two_pass_stats(a[c][m])[1] - two_pass_stats(b[c][m])[1])
                                      for c in range(3)]) for m in masks]),
            "gram": np.mean([_gram_oracle(a, b, m, extractor) for m in masks]),
        }
        got = {"resized": loss_resized(a, b).item(), "pixel": loss_pixel(a, b, masks).item(),
               "stat": loss_stat(a, b, masks).item(), "gram": loss_gram(a, b, masks, extractor).item()}
        for k in worst:
            worst[k] = max(worst[k], abs(got[k] - want[k]))
        zero_ok &= (loss_resized(a, a).item() == 0 and loss_pixel(a, a, masks).item() == 0
                    and loss_stat(a, a, masks).item() == 0 and loss_gram(a, a, masks, extractor).item() == 0)
    mesh = two_box_mesh()
    lo, hi = mesh.bbox()
    layout = build_scene_layout(lo, hi)
    setup = ShadingSetup(mesh, layout, front_camera(lo, hi, resolution=32))
    img = rng.uniform(size=(3, 32, 32))
    part = setup.gbuffer.image(setup.gbuffer.part_id)
    bundle = ViewBundle(0, img, setup, {0: part == 0, 1: part == 1})
    null, _ = total_loss([rng.uniform(size=(3, 32, 32))], [bundle], LossWeights(0, 0, 0, 0), extractor)
    ok = max(worst.values()) < 1e-6 and zero_ok and null.item() == 0
    report(6, ok, "max |impl - oracle| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f"; zero on identical inputs: {zero_ok}; lambda = 0 total: {null.item()}")


# ---------------------------------------------------------------------------
# 7. end-to-end determinism
# ---------------------------------------------------------------------------


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_pipeline_determinism(tmp_path):
    cfg = write_fixture_assets(tmp_path / "assets")
    trees = []
    for k in range(2):
        out = tmp_path / "assets" / "out"
        if out.exists():
            shutil.rmtree(out)
        code = cli.main(["pipeline", "--config", str(cfg), "--seed", "3",
                         "--mock-agent", str(cfg.parent / "agent.json")])
        trees.append((code, _tree(out)))
        shutil.copytree(out, tmp_path / f"run{k}")
    (c0, t0), (c1, t1) = trees
    same = t0 == t1 and c0 == c1 == 0
    report(7, same, f"exit codes {c0}/{c1}; {len(t0)} files; byte-identical: {t0 == t1}")


# ---------------------------------------------------------------------------
# 8. light linearity
# ---------------------------------------------------------------------------


def test_criterion_8_light_linearity():
    from test_render import _random_maps

    mesh = two_box_mesh()
    lo, hi = mesh.bbox()
    layout = build_scene_layout(lo, hi)
    setup = ShadingSetup(mesh, layout, front_camera(lo, hi, resolution=48))
    rng = np.random.default_rng(8)
    maps = {p: _random_maps(rng) for p in range(2)}
    I = layout.intensities() * rng.uniform(0.3, 1.7, size=(5, 3))
    a = shade(setup, maps, I, bounces=1).data
    b = shade(setup, maps, 2 * I, bounces=1).data
    dev = float(np.abs(b - 2 * a).max())
    black = all(np.all(shade(setup, maps, np.zeros((5, 3)), bounces=k).data == 0) for k in (1, 2))
    report(8, dev < 1e-6 and black, f"max |R(2I) - 2R(I)| = {dev:.1e}; zero lights black: {black}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
