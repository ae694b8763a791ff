"""Adaptive camera-view selection with per-part pixel-coverage guarantees."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from texpro.render.camera import Camera, look_from_spherical
from texpro.render.mesh import Mesh
from texpro.render.raster import rasterize

log = logging.getLogger(__name__)

EXACT_COVER_LIMIT = 20


@dataclass
class ViewSet:
    cameras: list[Camera]
    elevations: tuple[float, float]
    n_per_elevation: int
    front_index: int

    def __post_init__(self):
        if len(self.cameras) != 2 * self.n_per_elevation:
            raise ValueError("camera count must be 2 x n_per_elevation")
        if not self.n_per_elevation <= self.front_index < len(self.cameras):
            raise ValueError("front view must sit on the higher ring")


def sample_views(elev_low: float, elev_high: float, n: int, distance: float, target,
                 fov: float = 30.0, resolution: int = 128) -> ViewSet:
    """Two rings of ``n`` cameras; views 0..n-1 on the low ring, n..2n-1 on the high one."""
    if n < 1:
        raise ValueError("need at least one view per elevation")
    if distance <= 0:
        raise ValueError("camera distance must be positive")
    lo, hi = sorted((float(elev_low), float(elev_high)))
    cams = [look_from_spherical(target, distance, el, 360.0 * k / n, fov, resolution)
            for el in (lo, hi) for k in range(n)]
    return ViewSet(cams, (lo, hi), n, n)


def coverage_table(mesh: Mesh, views: ViewSet) -> np.ndarray:
    """Pixel counts [view][part] from rendered part masks."""
    table = np.zeros((len(views.cameras), mesh.n_parts), dtype=np.int64)
    for i, cam in enumerate(views.cameras):
        gb = rasterize(mesh, None, cam)
        ids = gb.part_id[gb.part_id >= 0]
        table[i] = np.bincount(ids, minlength=mesh.n_parts)
    return table


def min_set_cover(parts, sets: dict[int, set]) -> list[int]:
    """Smallest list of keys of ``sets`` whose union contains ``parts``.

    Exhaustive over combinations (lexicographically first optimum) when at
    most ``EXACT_COVER_LIMIT`` candidate sets, greedy otherwise.
    """
    need = set(parts)
    if not need:
        return []
    cand = sorted(k for k, s in sets.items() if s & need)
    covered = set().union(*(sets[k] for k in cand)) if cand else set()
    if not need <= covered:
        raise ValueError("parts cannot be covered by the candidate sets")
    if len(cand) <= EXACT_COVER_LIMIT:
        for r in range(1, len(cand) + 1):
            for combo in combinations(cand, r):
                if need <= set().union(*(sets[k] for k in combo)):
                    return list(combo)
    chosen, left = [], set(need)
    while left:
        best = max(cand, key=lambda k: (len(sets[k] & left), -k))
        chosen.append(best)
        left -= sets[best]
    return sorted(chosen)


@dataclass
class ViewSelection:
    views: list[int]
    front: int
    step1: list[int] = field(default_factory=list)
    step2: list[int] = field(default_factory=list)
    uncoverable: list[int] = field(default_factory=list)


def select_views(table, front: int, threshold: int = 500) -> ViewSelection:
    counts = np.asarray(table)
    if counts.ndim != 2 or counts.size == 0:
        raise ValueError("coverage table must be a nonempty [view][part] matrix")
    if np.any(counts < 0):
        raise ValueError("coverage counts must be nonnegative")
    if not 0 <= front < counts.shape[0]:
        raise ValueError(f"front index {front} out of range")
    best = counts.max(axis=0)
    uncoverable = [int(p) for p in np.flatnonzero(best == 0)]
    for p in uncoverable:
        log.warning("part %d has no pixels in any view; skipping it", p)
    weak = [p for p in range(counts.shape[1]) if counts[front, p] < threshold and best[p] > 0]

    # step 1: parts that never reach the threshold get their best view
    step1 = sorted({int(np.argmax(counts[:, p])) for p in weak if best[p] < threshold})
    # step 2: minimum set of marked views covering the parts still below threshold
    rest = [p for p in weak if best[p] >= threshold
            and not any(counts[v, p] >= threshold for v in step1)]
    sets = {v: {p for p in rest if counts[v, p] >= threshold} for v in range(counts.shape[0])}
    sets = {v: s for v, s in sets.items() if s}
    step2 = min_set_cover(rest, sets)
    views = sorted({front, *step1, *step2})
    return ViewSelection(views, front, step1, step2, uncoverable)


def assign_part_view(table, selected) -> dict[int, int]:
    """Part -> selected view with the most pixels (lowest index on ties)."""
    counts = np.asarray(table)
    sel = sorted(set(int(v) for v in selected))
    if not sel:
        raise ValueError("no selected views")
    sub = counts[sel]
    return {p: sel[int(np.argmax(sub[:, p]))] for p in range(counts.shape[1])}
