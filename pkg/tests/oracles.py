"""Independent reference implementations used by the tests."""
from __future__ import annotations

from collections import deque
from itertools import combinations

import numpy as np


def flood_fill_components(bits) -> list[list[tuple[int, int]]]:
    """4-connected components by breadth-first search."""
    bits = np.asarray(bits, dtype=bool)
    H, W = bits.shape
    seen = np.zeros_like(bits)
    comps = []
    for r in range(H):
        for c in range(W):
            if not bits[r, c] or seen[r, c]:
                continue
            comp, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                comp.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < H and 0 <= nx < W and bits[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(comp)
    return comps


def brute_force_min_cover(need: set, sets: list[set]) -> int:
    """Size of the smallest sub-collection of ``sets`` covering ``need``."""
    if not need:
        return 0
    for r in range(1, len(sets) + 1):
        for combo in combinations(range(len(sets)), r):
            if need <= set().union(*(sets[i] for i in combo)):
                return r
    raise ValueError("not coverable")


def majority(bits, k: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=int)
    H, W = bits.shape
    h = k // 2
    out = np.zeros_like(bits, dtype=bool)
    for r in range(H):
        for c in range(W):
            total = 0
            for dy in range(-h, h + 1):
                for dx in range(-h, h + 1):
                    total += bits[min(max(r + dy, 0), H - 1), min(max(c + dx, 0), W - 1)]
            out[r, c] = total * 2 > k * k
    return out


def block_downsample(img: np.ndarray, f: int) -> np.ndarray:
    C, H, W = img.shape
    out = np.zeros((C, H // f, W // f))
    for y in range(H // f):
        for x in range(W // f):
            out[:, y, x] = img[:, y * f:(y + 1) * f, x * f:(x + 1) * f].mean(axis=(1, 2))
    return out


def two_pass_stats(values: np.ndarray) -> tuple[float, float]:
    """Mean and population variance of a 1-D sample."""
    n = len(values)
    mu = sum(values) / n
    var = sum((v - mu) ** 2 for v in values) / n
    return float(mu), float(var)
