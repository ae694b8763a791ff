"""Vectorised ray/triangle intersection (Moller-Trumbore)."""
from __future__ import annotations

import numpy as np

_EPS = 1e-12
_CHUNK = 1 << 21  # ray-triangle pairs per block


def _blocks(n_rays: int, n_tris: int):
    step = max(1, _CHUNK // max(n_tris, 1))
    for s in range(0, n_rays, step):
        yield slice(s, min(s + step, n_rays))


def _intersect(o, d, v0, e1, e2):
    """t, b1, b2 for all (ray, tri) pairs; misses get t = inf."""
    p = np.cross(d[:, None, :], e2[None])
    det = np.einsum("rtk,tk->rt", p, e1)
    ok = np.abs(det) > _EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o[:, None, :] - v0[None]
    b1 = np.einsum("rtk,rtk->rt", s, p) * inv
    q = np.cross(s, e1[None])
    b2 = np.einsum("rk,rtk->rt", d, q) * inv
    t = np.einsum("tk,rtk->rt", e2, q) * inv
    hit = ok & (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1)
    return np.where(hit, t, np.inf), b1, b2, det


def closest_hit(origins, dirs, tris, cull=None, t_min: float = 1e-9):
    """Nearest intersection per ray.

    ``cull`` marks single-sided triangles that are invisible from behind
    (ray direction along the triangle's winding normal).
    Returns (tri index or -1, t, barycentrics (R, 3)).
    """
    tris = np.asarray(tris, dtype=np.float64)
    n = len(origins)
    idx = np.full(n, -1, dtype=np.int64)
    tbest = np.full(n, np.inf)
    bary = np.zeros((n, 3))
    if len(tris) == 0:
        return idx, tbest, bary
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    for sl in _blocks(n, len(tris)):
        t, b1, b2, det = _intersect(origins[sl], dirs[sl], v0, e1, e2)
        if cull is not None:
            t = np.where(np.asarray(cull)[None] & (det < 0), np.inf, t)
        t = np.where(t > t_min, t, np.inf)
        k = np.argmin(t, axis=1)
        rows = np.arange(len(k))
        tk = t[rows, k]
        hit = np.isfinite(tk)
        idx[sl] = np.where(hit, k, -1)
        tbest[sl] = tk
        u, v = b1[rows, k], b2[rows, k]
        bary[sl] = np.stack([1 - u - v, u, v], axis=1) * hit[:, None]
    return idx, tbest, bary


def occluded(origins, dirs, t_max, tris, t_min: float = 1e-6) -> np.ndarray:
    """True where a ray hits any triangle with t in (t_min, t_max)."""
    tris = np.asarray(tris, dtype=np.float64)
    n = len(origins)
    out = np.zeros(n, dtype=bool)
    if len(tris) == 0 or n == 0:
        return out
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    # only segments that touch the occluders' bounding box need triangle tests
    cand = np.flatnonzero(segment_hits_box(origins, dirs, t_max, tris.min(axis=(0, 1)),
                                           tris.max(axis=(0, 1))))
    if len(cand) == 0:
        return out
    o, d, tm = origins[cand], dirs[cand], t_max[cand]
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    res = np.zeros(len(cand), dtype=bool)
    for sl in _blocks(len(cand), len(tris)):
        t, *_ = _intersect(o[sl], d[sl], v0, e1, e2)
        res[sl] = np.any((t > t_min) & (t < tm[sl, None]), axis=1)
    out[cand] = res
    return out


def segment_hits_box(origins, dirs, t_max, lo, hi, pad: float = 1e-9) -> np.ndarray:
    """Slab test: does o + t d, t in [0, t_max], touch the box [lo, hi]?"""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - pad - origins) * inv
        t2 = (hi + pad - origins) * inv
    tlo = np.nanmax(np.minimum(t1, t2), axis=1)
    thi = np.nanmin(np.maximum(t1, t2), axis=1)
    return (thi >= np.maximum(tlo, 0.0)) & (tlo <= t_max)
