"""Differentiable GGX metal-rough shading under sampled area lights.

Geometry (visibility, light directions, solid-angle weights) is fixed per
camera and precomputed in :class:`ShadingSetup`.  Only texel values and light
intensities are on the tape, and the image is linear in the intensities.
"""
from __future__ import annotations

import numpy as np

from texpro import tensor as T
from texpro.tensor import Tensor
from texpro.matgraph.graph import TextureMapSet
from texpro.render.camera import Camera, look_from_spherical
from texpro.render.mesh import Mesh, box_triangles, mesh_from_triangles
from texpro.render.raster import GBuffer, rasterize
from texpro.render.raycast import occluded
from texpro.render.scene import LUM, N_LIGHTS, SceneLayout, quad_normal

SAMPLES_PER_LIGHT = 16
MIN_ROUGHNESS = 0.05
DIELECTRIC_F0 = 0.04


def _light_terms(points, normals, samples, s_normals, s_weight, occluders, eps):
    """Unit light directions (n, S, 3) and weights V * cos_l * dA / (d^2 + dA/pi) (n, S).

    The dA/pi term is the small-disk form factor; it keeps points right next
    to a light sample finite.
    """
    d = samples[None, :, :] - points[:, None, :]
    dist = np.linalg.norm(d, axis=2)
    l = d / np.maximum(dist, 1e-12)[..., None]
    cos_l = np.maximum(0.0, -np.einsum("nsk,sk->ns", l, s_normals))
    facing = np.einsum("nsk,nk->ns", l, normals) > 0
    gv = cos_l * s_weight[None] / (dist * dist + s_weight[None] / np.pi) * facing
    live = gv > 0
    if np.any(live) and len(occluders):
        ni, si = np.nonzero(live)
        o = points[ni] + normals[ni] * eps
        blocked = occluded(o, l[ni, si], dist[ni, si] - eps, occluders)
        gv[ni[blocked], si[blocked]] = 0.0
    return l, gv


def _room_points(layout: SceneLayout, floor_n: int = 8, wall_n: int = 4):
    """Stratified patch centres, normals and areas on floor and walls."""
    pts, nrm, area = [], [], []
    for k, q in enumerate(layout.surfaces()):
        m = floor_n if k == 0 else wall_n
        c = (np.arange(m) + 0.5) / m
        s, t = np.meshgrid(c, c, indexing="ij")
        e1, e2 = q[1] - q[0], q[3] - q[0]
        p = q[0] + s.reshape(-1, 1) * e1 + t.reshape(-1, 1) * e2
        pts.append(p)
        nrm.append(np.repeat(quad_normal(q)[None], len(p), axis=0))
        area.append(np.full(len(p), np.linalg.norm(np.cross(e1, e2)) / (m * m)))
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(area)


class ShadingSetup:
    """Fixed-geometry shading terms for one (mesh, layout, camera)."""

    def __init__(self, mesh: Mesh, layout: SceneLayout, camera: Camera,
                 samples: int = SAMPLES_PER_LIGHT, seed: int = 0, gbuffer: GBuffer | None = None):
        self.mesh, self.layout, self.camera = mesh, layout, camera
        self.gbuffer = gb = gbuffer if gbuffer is not None else rasterize(mesh, layout, camera)
        self.n_pixels = gb.resolution ** 2
        self.n_parts = mesh.n_parts
        self.occluders = mesh.triangles()
        lo, hi = layout.room_bounds()
        self.eps = 1e-4 * float(np.max(hi - lo))

        pts, nrms, wts, sel = [], [], [], []
        for k, light in enumerate(layout.lights):
            s = light.samples(samples, seed=seed * 7919 + k)
            pts.append(s)
            nrms.append(np.repeat(light.normal[None], samples, axis=0))
            wts.append(np.full(samples, light.area / samples))
            sel += [k] * samples
        self.sample_points = np.concatenate(pts)
        self.sample_normals = np.concatenate(nrms)
        self.sample_weights = np.concatenate(wts)
        self.select = np.eye(N_LIGHTS)[np.array(sel)]  # (S, 5)

        part = gb.part_id
        mesh_px = np.flatnonzero(part >= 0)
        self.mesh_px = mesh_px[np.argsort(part[mesh_px], kind="stable")]
        pm = part[self.mesh_px]
        self.part_slices = {p: (int(np.searchsorted(pm, p, "left")), int(np.searchsorted(pm, p, "right")))
                            for p in range(self.n_parts)}
        self.room_px = np.flatnonzero(gb.surface >= 0)
        self.bg_px = np.flatnonzero(~gb.coverage)
        order = np.concatenate([self.mesh_px, self.room_px, self.bg_px])
        self.inverse = np.empty_like(order)
        self.inverse[order] = np.arange(len(order))

        m = self.mesh_px
        self.uv = gb.uv[m]
        self.tbn = np.stack([gb.tangent[m], gb.bitangent[m], gb.normal[m]], axis=1)  # (Pm, 3, 3)
        self.view = gb.view_dir[m]
        l, gv = self._terms(gb.position[m], gb.geo_normal[m])
        self.L = [np.ascontiguousarray(l[..., k]) for k in range(3)]
        h = l + self.view[:, None, :]
        h /= np.maximum(np.linalg.norm(h, axis=2, keepdims=True), 1e-12)
        self.H = [np.ascontiguousarray(h[..., k]) for k in range(3)]
        vdh = np.clip(np.einsum("nsk,nk->ns", h, self.view), 0.0, 1.0)
        self.schlick = (1.0 - vdh) ** 5
        self.gv = gv
        self._mesh_geo_normal = gb.geo_normal[m]

        r = self.room_px
        lr, gvr = self._terms(gb.position[r], gb.geo_normal[r])
        cos_r = np.maximum(0.0, np.einsum("nsk,nk->ns", lr, gb.geo_normal[r]))
        self.room_direct = layout.wall_albedo / np.pi * cos_r * gvr
        self._indirect = None

    def _terms(self, points, normals):
        return _light_terms(points, normals, self.sample_points, self.sample_normals,
                            self.sample_weights, self.occluders, self.eps)

    def indirect(self) -> tuple[np.ndarray, np.ndarray]:
        """One diffuse bounce off the constant-albedo room: irradiance per unit sample radiance."""
        if self._indirect is None:
            P, N, A = _room_points(self.layout)
            lr, gvr = self._terms(P + N * self.eps, N)
            cos_r = np.maximum(0.0, np.einsum("nsk,nk->ns", lr, N))
            radiance = self.layout.wall_albedo / np.pi * cos_r * gvr  # (R, S)
            gb = self.gbuffer
            out = []
            for px in (self.mesh_px, self.room_px):
                pts, nrm = gb.position[px], gb.geo_normal[px]
                d = P[None] - pts[:, None]
                dist2 = np.einsum("nrk,nrk->nr", d, d)
                l = d / np.sqrt(np.maximum(dist2, 1e-24))[..., None]
                cos_p = np.maximum(0.0, np.einsum("nrk,nk->nr", l, nrm))
                cos_q = np.maximum(0.0, -np.einsum("nrk,rk->nr", l, N))
                g = cos_p * cos_q * A[None] / (dist2 + A[None] / np.pi)
                live = g > 0
                if np.any(live):
                    ni, ri = np.nonzero(live)
                    o = pts[ni] + nrm[ni] * self.eps
                    blocked = occluded(o, l[ni, ri], np.sqrt(dist2[ni, ri]) - self.eps, self.occluders)
                    g[ni[blocked], ri[blocked]] = 0.0
                out.append(g @ radiance)
            self._indirect = (out[0], self.layout.wall_albedo / np.pi * out[1])
        return self._indirect


def constant_maps(basecolor=(0.5, 0.5, 0.5), roughness=0.5, metallic=0.0, resolution: int = 4) -> TextureMapSet:
    r = resolution
    base = np.broadcast_to(np.asarray(basecolor, float).reshape(3, 1, 1), (3, r, r)).copy()
    normal = np.broadcast_to(np.array([0.5, 0.5, 1.0]).reshape(3, 1, 1), (3, r, r)).copy()
    return TextureMapSet(Tensor(base), Tensor(normal), Tensor(np.full((1, r, r), float(roughness))),
                         Tensor(np.full((1, r, r), float(metallic))), r)


def _gather(setup: ShadingSetup, maps, channel: str, depth: int, default):
    parts = []
    for p in range(setup.n_parts):
        a, b = setup.part_slices[p]
        if a == b:
            continue
        img = getattr(maps[p], channel)
        if img is None:
            parts.append(Tensor(np.full((depth, b - a), default), _check=False))
            continue
        u, v = setup.uv[a:b, 0], setup.uv[a:b, 1]
        parts.append(T.sample_bilinear(img, u, v))
    if not parts:
        return None
    return T.transpose(T.concat(parts, axis=1) if len(parts) > 1 else parts[0], (1, 0))


def shade(setup: ShadingSetup, maps, intensities, bounces: int = 2) -> Tensor:
    """Linear radiance image (3, H, W).

    ``maps`` maps part id -> TextureMapSet; ``intensities`` is a (5, 3)
    tensor or array of nonnegative per-light RGB radiance.
    """
    if bounces not in (1, 2):
        raise ValueError("bounces must be 1 or 2")
    for p in range(setup.n_parts):
        a, b = setup.part_slices[p]
        if b > a and (p not in maps if isinstance(maps, dict) else p >= len(maps)):
            raise ValueError(f"no material assigned to visible part {p}")
    I = T.as_tensor(intensities)
    if I.shape != (N_LIGHTS, 3):
        raise ValueError(f"intensities must have shape (5, 3), got {I.shape}")
    lsamp = Tensor(setup.select, _check=False) @ I  # (S, 3)
    ind_mesh, ind_room = setup.indirect() if bounces == 2 else (None, None)

    chunks = []
    if len(setup.mesh_px):
        base = _gather(setup, maps, "basecolor", 3, 0.0)
        nmap = _gather(setup, maps, "normal", 3, 0.5)
        rough = _gather(setup, maps, "roughness", 1, 0.5)
        metal = _gather(setup, maps, "metallic", 1, 0.0)
        chunks.append(_shade_surface(setup, base, nmap, rough, metal, lsamp, ind_mesh))
    if len(setup.room_px):
        c = setup.room_direct if ind_room is None else setup.room_direct + ind_room
        chunks.append(Tensor(c, _check=False) @ lsamp)
    if len(setup.bg_px):
        chunks.append(Tensor(np.zeros((len(setup.bg_px), 3)), _check=False))
    flat = T.concat(chunks, axis=0) if len(chunks) > 1 else chunks[0]
    img = T.take(flat, setup.inverse, axis=0)  # (N, 3) in pixel order
    r = setup.gbuffer.resolution
    return T.reshape(T.transpose(img, (1, 0)), (3, r, r))


def _shade_surface(setup, base, nmap, rough, metal, lsamp, indirect):
    tbn = Tensor(setup.tbn, _check=False)
    nt = nmap * 2.0 - 1.0                                       # (Pm, 3)
    n = T.sum(T.reshape(nt, nt.shape + (1,)) * tbn, axis=1)     # (Pm, 3)
    n = n * T.pow(T.sum(n * n, axis=1, keepdims=True) + 1e-12, -0.5)
    nx, ny, nz = n[:, 0:1], n[:, 1:2], n[:, 2:3]
    Lx, Ly, Lz = (Tensor(c, _check=False) for c in setup.L)
    Hx, Hy, Hz = (Tensor(c, _check=False) for c in setup.H)
    ndl = T.relu(nx * Lx + ny * Ly + nz * Lz)                   # (Pm, S)
    ndh = T.relu(nx * Hx + ny * Hy + nz * Hz)
    ndv = T.clip(T.sum(n * Tensor(setup.view, _check=False), axis=1, keepdims=True), 1e-3, 1.0)

    r = MIN_ROUGHNESS + (1.0 - MIN_ROUGHNESS) * rough           # (Pm, 1)
    a = r * r
    a2 = a * a
    denom = ndh * ndh * (a2 - 1.0) + 1.0
    D = a2 / (np.pi * denom * denom)
    k = a * 0.5
    g_l = ndl / (ndl * (1.0 - k) + k)
    g_v = ndv / (ndv * (1.0 - k) + k)
    gv = Tensor(setup.gv, _check=False)
    spec_w = D * g_l * g_v / (4.0 * ndv) * gv                   # (Pm, S)
    w = Tensor(setup.schlick, _check=False)
    f0 = DIELECTRIC_F0 * (1.0 - metal) + base * metal           # (Pm, 3)
    spec = f0 * ((spec_w * (1.0 - w)) @ lsamp) + (spec_w * w) @ lsamp

    diff_w = ndl * gv
    if indirect is not None:
        diff_w = diff_w + Tensor(indirect, _check=False)
    kd = base * (1.0 - metal) * (1.0 / np.pi)
    return kd * (diff_w @ lsamp) + spec


def render(mesh: Mesh, layout: SceneLayout, camera: Camera, maps, intensities=None,
           bounces: int = 2, seed: int = 0) -> Tensor:
    setup = ShadingSetup(mesh, layout, camera, seed=seed)
    return shade(setup, maps, layout.intensities() if intensities is None else intensities, bounces)


def luminance(img) -> np.ndarray:
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    return np.tensordot(LUM, data, axes=(0, 0))


def front_camera(bbox_lo, bbox_hi, distance_factor: float = 2.5, elevation: float = 30.0,
                 fov: float = 30.0, resolution: int = 64) -> Camera:
    lo, hi = np.asarray(bbox_lo, float), np.asarray(bbox_hi, float)
    diag = float(np.linalg.norm(hi - lo))
    return look_from_spherical((lo + hi) / 2, distance_factor * diag, elevation, 0.0, fov, resolution)


def gray_preview_luminance(layout: SceneLayout, resolution: int = 64, bounces: int = 2) -> float:
    """Mean object luminance of the gray bounding-box proxy at unit light intensity."""
    lo, hi = layout.bbox
    proxy = mesh_from_triangles(box_triangles(lo, hi), np.zeros(12, dtype=int))
    cam = front_camera(lo, hi, resolution=resolution)
    unit = layout.with_intensities(np.ones((N_LIGHTS, 3)))
    setup = ShadingSetup(proxy, unit, cam)
    img = shade(setup, {0: constant_maps()}, np.ones((N_LIGHTS, 3)), bounces)
    lum = luminance(img).reshape(-1)
    return float(lum[setup.mesh_px].mean()) if len(setup.mesh_px) else 0.0
