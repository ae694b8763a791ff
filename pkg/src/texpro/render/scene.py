"""Adaptive room layout (floor, four walls) with five area lights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_LIGHTS = 5
LUM = np.array([0.2126, 0.7152, 0.0722])


def _quad(center, a, b) -> np.ndarray:
    """Corners of a planar quad with half-axes ``a``, ``b``; normal is a x b."""
    c = np.asarray(center, float)
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.array([c - a - b, c + a - b, c + a + b, c - a + b])


def quad_normal(corners) -> np.ndarray:
    n = np.cross(corners[1] - corners[0], corners[3] - corners[0])
    return n / np.linalg.norm(n)


def quad_triangles(corners) -> np.ndarray:
    c = np.asarray(corners)
    return np.array([[c[0], c[1], c[2]], [c[0], c[2], c[3]]])


@dataclass
class AreaLight:
    corners: np.ndarray           # (4, 3)
    rgb_intensity: np.ndarray     # (3,) emitted radiance

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(4, 3)
        self.rgb_intensity = np.asarray(self.rgb_intensity, dtype=np.float64).reshape(3)
        n = quad_normal(self.corners)
        extent = np.linalg.norm(self.corners[2] - self.corners[0])
        dev = np.abs((self.corners - self.corners[0]) @ n).max()
        if dev > 1e-5 * extent:
            raise ValueError("area light corners are not coplanar")
        if np.any(self.rgb_intensity < 0):
            raise ValueError("light intensity must be nonnegative")

    @property
    def normal(self) -> np.ndarray:
        return quad_normal(self.corners)

    @property
    def area(self) -> float:
        c = self.corners
        return float(np.linalg.norm(np.cross(c[1] - c[0], c[3] - c[0])))

    def samples(self, n: int = 16, seed: int = 0) -> np.ndarray:
        """Jittered stratified points on the quad (k x k strata, n = k*k)."""
        k = int(round(np.sqrt(n)))
        if k * k != n:
            raise ValueError("sample count must be a perfect square")
        rng = np.random.default_rng(seed)
        jj, ii = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        s = (ii.reshape(-1) + rng.uniform(size=n)) / k
        t = (jj.reshape(-1) + rng.uniform(size=n)) / k
        c = self.corners
        return c[0] + s[:, None] * (c[1] - c[0]) + t[:, None] * (c[3] - c[0])


@dataclass
class SceneLayout:
    floor: np.ndarray              # (4, 3)
    walls: list[np.ndarray]        # 4 x (4, 3), normals point into the room
    lights: list[AreaLight]        # 4 wall lights then the overhead light
    wall_albedo: float
    bbox: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if len(self.lights) != N_LIGHTS:
            raise ValueError(f"scene needs exactly {N_LIGHTS} lights")
        if not 0.0 <= self.wall_albedo <= 1.0:
            raise ValueError("wall_albedo must be in [0, 1]")

    def surfaces(self) -> list[np.ndarray]:
        return [self.floor, *self.walls]

    def room_triangles(self) -> tuple[np.ndarray, np.ndarray]:
        """(T, 3, 3) triangles and their surface index (0 floor, 1..4 walls)."""
        tris, ids = [], []
        for k, q in enumerate(self.surfaces()):
            tris.append(quad_triangles(q))
            ids += [k, k]
        return np.concatenate(tris), np.array(ids)

    def intensities(self) -> np.ndarray:
        return np.stack([l.rgb_intensity for l in self.lights])

    def with_intensities(self, values) -> SceneLayout:
        values = np.asarray(values, dtype=np.float64).reshape(N_LIGHTS, 3)
        lights = [AreaLight(l.corners, v) for l, v in zip(self.lights, values)]
        return SceneLayout(self.floor, self.walls, lights, self.wall_albedo, self.bbox)

    def room_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate(self.surfaces())
        return pts.min(axis=0), pts.max(axis=0)


def geometry_layout(bbox_lo, bbox_hi, wall_albedo: float = 0.6,
                    wall_factor: float = 2.0, light_height_factor: float = 2.0,
                    light_size: float = 0.5) -> SceneLayout:
    """Room and light geometry for a bounding box; all lights at unit intensity."""
    lo = np.asarray(bbox_lo, dtype=np.float64)
    hi = np.asarray(bbox_hi, dtype=np.float64)
    ext = hi - lo
    if np.any(ext <= 0) or not np.all(np.isfinite(ext)):
        raise ValueError(f"degenerate bounding box with extents {ext.tolist()}")
    cx, cz = (lo[0] + hi[0]) / 2, (lo[2] + hi[2]) / 2
    h = ext[1]
    half = wall_factor * max(ext[0], ext[2]) / 2
    floor_y = lo[1]
    top_y = hi[1] + light_height_factor * h
    mid_room = (floor_y + top_y) / 2
    x, y, z = np.eye(3)
    wall_half_h = (top_y - floor_y) / 2

    floor = _quad([cx, floor_y, cz], half * z, half * x)
    walls = [
        _quad([cx - half, mid_room, cz], wall_half_h * y, half * z),
        _quad([cx + half, mid_room, cz], half * z, wall_half_h * y),
        _quad([cx, mid_room, cz - half], half * x, wall_half_h * y),
        _quad([cx, mid_room, cz + half], wall_half_h * y, half * x),
    ]
    # wall lights: centred at the object's vertical centre on each wall's inner face;
    # width is light_size x wall width, height capped so the quad stays above the floor
    obj_mid = (lo[1] + hi[1]) / 2
    lw = light_size * half
    lh = min(light_size * wall_half_h, obj_mid - floor_y)
    eps = 1e-3 * half
    lights = [
        AreaLight(_quad([cx - half + eps, obj_mid, cz], lh * y, lw * z), np.ones(3)),
        AreaLight(_quad([cx + half - eps, obj_mid, cz], lw * z, lh * y), np.ones(3)),
        AreaLight(_quad([cx, obj_mid, cz - half + eps], lw * x, lh * y), np.ones(3)),
        AreaLight(_quad([cx, obj_mid, cz + half - eps], lh * y, lw * x), np.ones(3)),
        AreaLight(_quad([cx, top_y, cz], light_size * half * x, light_size * half * z), np.ones(3)),
    ]
    return SceneLayout(floor, walls, lights, float(wall_albedo), (lo, hi))


def build_scene_layout(bbox_lo, bbox_hi, wall_albedo: float = 0.6, target_luminance: float = 0.5,
                       calibrate: bool = True, **kw) -> SceneLayout:
    """Room layout with equal light intensities.

    Intensities are scaled so a neutral-gray preview of the bounding box,
    seen from the front camera, has mean luminance ``target_luminance``.
    """
    layout = geometry_layout(bbox_lo, bbox_hi, wall_albedo, **kw)
    if not calibrate:
        return layout
    from texpro.render.shading import gray_preview_luminance

    lum = gray_preview_luminance(layout)
    if lum <= 0:
        raise ValueError("preview render received no light")
    return layout.with_intensities(np.full((N_LIGHTS, 3), target_luminance / lum))
