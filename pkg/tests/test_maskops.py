import numpy as np
import pytest

from texpro.maskops import (
    Mask, MaskKind, align, bbox_crop, components, erode, fallback_external, filter_regions,
    mask_filename, median_filter, smooth,
)
from oracles import flood_fill_components, majority


def _random_mask(rng, shape=(24, 24), p=None):
    p = rng.uniform(0.2, 0.8) if p is None else p
    return rng.uniform(size=shape) < p


def test_median_constant_and_isolated():
    assert median_filter(np.ones((6, 6), bool), 5).all()
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    assert not median_filter(m, 3).any()


def test_median_checkerboard_blocks_matches_majority_oracle():
    yy, xx = np.mgrid[:12, :12]
    m = ((yy // 2 + xx // 2) % 2).astype(bool)
    assert np.array_equal(median_filter(m, 3), majority(m, 3))
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = _random_mask(rng, (10, 13))
        for k in (3, 5):
            assert np.array_equal(median_filter(r, k), majority(r, k))


def test_median_even_window_rejected():
    with pytest.raises(ValueError):
        median_filter(np.ones((4, 4), bool), 4)


def test_erosion_examples_and_composition():
    m = np.zeros((7, 7), bool)
    m[2:5, 2:5] = True
    e = erode(m, 1)
    assert e.sum() == 1 and e[3, 3]
    assert not erode(np.zeros((5, 5), bool), 1).any()
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = _random_mask(rng, p=0.85)
        assert np.array_equal(erode(erode(r, 1), 1), erode(r, 2))
        assert not np.any(erode(r, 1) & ~r)


def test_filter_regions_example():
    rendered = np.zeros((30, 30), bool)
    rendered[0:10, 0:10] = True          # one component of 100
    m = np.zeros((30, 30), bool)
    m[0:4, 0:10] = True                  # 40
    m[20:26, 0:10] = True                # 60
    out = filter_regions(m, rendered, 0.5)
    assert not out[0:4].any() and out[20:26, 0:10].all()
    single = np.zeros((30, 30), bool)
    single[5:15, 5:15] = True
    assert np.array_equal(filter_regions(single, rendered, 0.5), single)


def test_filter_regions_boundary():
    rendered = np.zeros((20, 20), bool)
    rendered[0:4, 0:5] = True            # P_r = 20, cutoff 10
    m = np.zeros((20, 20), bool)
    m[10, 0:10] = True                   # size 10: kept
    m[15, 0:9] = True                    # size 9: removed
    out = filter_regions(m, rendered, 0.5)
    assert out[10].sum() == 10 and out[15].sum() == 0


def test_filter_regions_matches_flood_fill_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = _random_mask(rng, (16, 16), p=0.45)
        r = _random_mask(rng, (16, 16), p=0.5)
        comps = flood_fill_components(r)
        cutoff = 0.5 * min(len(c) for c in comps)
        expected = np.zeros_like(m)
        for comp in flood_fill_components(m):
            if len(comp) >= cutoff:
                for y, x in comp:
                    expected[y, x] = True
        assert np.array_equal(filter_regions(m, r, 0.5), expected)
        _, sizes = components(m)
        assert sorted(sizes.tolist()) == sorted(len(c) for c in flood_fill_components(m))


def test_filter_regions_empty_rendered_rejected():
    with pytest.raises(ValueError):
        filter_regions(np.ones((4, 4), bool), np.zeros((4, 4), bool))


def test_smoothing_chain_adds_nothing():
    rng = np.random.default_rng(3)
    for _ in range(30):
        m = _random_mask(rng, (32, 32), p=0.6)
        r = _random_mask(rng, (32, 32), p=0.7)
        med = median_filter(m, 5)
        assert not np.any(smooth(m, r) & ~med)


def test_align_semantics():
    rng = np.random.default_rng(4)
    a = _random_mask(rng)
    assert np.array_equal(align(a, a), a)
    assert not align(a, ~a).any()
    for _ in range(50):
        r, e = _random_mask(rng), _random_mask(rng)
        out = align(r, e)
        assert not np.any(out & ~r) and not np.any(out & ~e)
        assert out.sum() <= min(r.sum(), e.sum())
    m = align(Mask(a, 1, 2, "rendered"), a)
    assert m.kind is MaskKind.ALIGNED and m.view == 1 and m.part == 2
    with pytest.raises(ValueError):
        align(np.ones((3, 3), bool), np.ones((3, 4), bool))


def test_bbox_crop():
    img = np.random.default_rng(5).uniform(size=(3, 10, 12))
    cm, ci, box = bbox_crop(np.ones((10, 12), bool), img)
    assert box == (0, 0, 10, 12) and np.array_equal(ci, img)
    single = np.zeros((10, 12), bool)
    single[3, 7] = True
    cm, ci, box = bbox_crop(single, img)
    assert box == (3, 7, 4, 8) and cm.shape == (1, 1) and ci.shape == (3, 1, 1)
    rng = np.random.default_rng(6)
    for _ in range(50):
        m = _random_mask(rng, (10, 12), p=0.05)
        if not m.any():
            continue
        r0, c0, r1, c1 = bbox_crop(m, img)[2]
        ys, xs = np.nonzero(m)
        assert (r0, c0, r1, c1) == (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)
    with pytest.raises(ValueError):
        bbox_crop(np.zeros((10, 12), bool), img)


def test_mask_type_and_names():
    with pytest.raises(ValueError):
        Mask(np.array([[0, 2]]))
    assert mask_filename(3, 1, "aligned") == "mask_v3_p1_aligned.png"


def test_fallback_external_subset_of_rendered():
    rng = np.random.default_rng(7)
    r = np.zeros((16, 16), bool)
    r[4:12, 4:12] = True
    pre = np.full((3, 16, 16), 0.6)
    ref = pre * 0.5
    ref[:, 4:6, 4:12] = 0.0              # a strip that disagrees with the preview
    out = fallback_external(ref, pre, r)
    assert not np.any(out & ~r)
    assert not out[4:6].any() and out[6:12, 4:12].all()
