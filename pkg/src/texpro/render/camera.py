"""Pinhole look-at cameras."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_RESOLUTION = 1024


@dataclass
class Camera:
    position: np.ndarray
    target: np.ndarray
    up: np.ndarray
    fov: float = 30.0        # vertical, degrees
    resolution: int = 128    # square images

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if np.linalg.norm(self.position - self.target) < 1e-12:
            raise ValueError("camera position coincides with look-at target")
        if not 10.0 < self.fov < 120.0:
            raise ValueError(f"fov must be in (10, 120) degrees, got {self.fov}")
        if not 1 <= int(self.resolution) <= MAX_RESOLUTION:
            raise ValueError(f"camera resolution must be in [1, {MAX_RESOLUTION}]")
        self.resolution = int(self.resolution)
        f = self.forward
        if np.linalg.norm(np.cross(f, self.up)) < 1e-9:
            raise ValueError("up vector parallel to viewing direction")

    @property
    def forward(self) -> np.ndarray:
        d = self.target - self.position
        return d / np.linalg.norm(d)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, true_up, forward) orthonormal frame."""
        f = self.forward
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return r, u, f

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for pixel centres, row-major (H*W, 3)."""
        n = self.resolution
        r, u, f = self.basis()
        t = np.tan(np.radians(self.fov) / 2)
        c = (np.arange(n) + 0.5) / n * 2 - 1
        yy, xx = np.meshgrid(-c * t, c * t, indexing="ij")
        d = f[None] + xx.reshape(-1, 1) * r[None] + yy.reshape(-1, 1) * u[None]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def to_line(self, index: int) -> str:
        vals = [*self.position, *self.target, *self.up, self.fov]
        return f"{index} " + " ".join(f"{x:.9g}" for x in vals)


def look_from_spherical(target, distance: float, elevation: float, azimuth: float,
                        fov: float = 30.0, resolution: int = 128) -> Camera:
    """Camera on a sphere around ``target``; azimuth 0 looks from +z, y is up."""
    el, az = np.radians(elevation), np.radians(azimuth)
    offset = distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    target = np.asarray(target, dtype=np.float64)
    return Camera(target + offset, target, np.array([0.0, 1.0, 0.0]), fov, resolution)
