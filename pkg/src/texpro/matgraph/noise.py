"""Seeded, tileable lattice noise evaluated at texel centres (plain numpy)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

# max |n| of 2-D gradient noise with unit gradients
PERLIN_MAX = np.sqrt(0.5)


def texel_grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinates of texel centres; u along columns, v along rows."""
    c = (np.arange(resolution) + 0.5) / resolution
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


@lru_cache(maxsize=256)
def perlin(resolution: int, period: int, seed: int) -> np.ndarray:
    """Gradient noise with an integer lattice ``period`` per unit; tiles on [0,1]^2."""
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(period, period))
    gx, gy = np.cos(angles), np.sin(angles)
    u, v = texel_grid(resolution)
    x, y = u * period, v * period
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    out = np.zeros_like(x)
    sx, sy = _fade(fx), _fade(fy)
    for dy in (0, 1):
        for dx in (0, 1):
            ix = (x0 + dx) % period
            iy = (y0 + dy) % period
            dot = gx[iy, ix] * (fx - dx) + gy[iy, ix] * (fy - dy)
            wx = sx if dx else 1 - sx
            wy = sy if dy else 1 - sy
            out += wx * wy * dot
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def cell_random(resolution: int, rows: int, cols: int, offset: float, seed: int) -> np.ndarray:
    """Per-cell uniform random value on a (staggered) rows x cols grid."""
    rng = np.random.default_rng(seed)
    vals = rng.uniform(size=(rows, cols))
    u, v = texel_grid(resolution)
    r = np.floor(v * rows).astype(int) % rows
    shift = offset * (r % 2)
    c = np.floor(u * cols + shift).astype(int) % cols
    out = vals[r, c]
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def brick_distance(resolution: int, rows: int, cols: int, offset: float) -> np.ndarray:
    """Distance (uv units) from each texel centre to its brick's nearest edge."""
    u, v = texel_grid(resolution)
    y = v * rows
    fy = y - np.floor(y)
    shift = offset * (np.floor(y).astype(int) % 2)
    x = u * cols + shift
    fx = x - np.floor(x)
    dx = np.minimum(fx, 1 - fx) / cols
    dy = np.minimum(fy, 1 - fy) / rows
    out = np.minimum(dx, dy)
    out.setflags(write=False)
    return out
