"""Visibility: G-buffers, rendered part masks and condition maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from texpro.render.camera import Camera
from texpro.render.mesh import Mesh, face_normals
from texpro.render.raycast import closest_hit
from texpro.render.scene import SceneLayout, quad_normal


@dataclass
class GBuffer:
    """Per-pixel surface attributes, flattened row-major (N = H * W)."""

    resolution: int
    position: np.ndarray     # (N, 3)
    normal: np.ndarray       # (N, 3) interpolated shading normal
    geo_normal: np.ndarray   # (N, 3) facing the camera
    tangent: np.ndarray      # (N, 3) dP/du, orthonormalised
    bitangent: np.ndarray    # (N, 3) dP/dv, orthonormalised
    uv: np.ndarray           # (N, 2)
    part_id: np.ndarray      # (N,) -1 for room / background
    surface: np.ndarray      # (N,) room surface index, -1 otherwise
    coverage: np.ndarray     # (N,) bool
    depth: np.ndarray        # (N,) camera-space z, inf on background
    view_dir: np.ndarray     # (N, 3) unit vector towards the camera
    camera: Camera

    def image(self, values: np.ndarray) -> np.ndarray:
        r = self.resolution
        return values.reshape((r, r) + values.shape[1:])


def _tangent_frames(tris, uvs, normals):
    """Per-face dP/du, dP/dv from uv gradients, orthonormalised against ``normals``."""
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    d1 = uvs[:, 1] - uvs[:, 0]
    d2 = uvs[:, 2] - uvs[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)[:, None]
    t = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) * inv
    b = (e2 * d1[:, 0:1] - e1 * d2[:, 0:1]) * inv
    # fallback frame where uvs are degenerate
    fb = np.cross(normals, np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]]))
    t = np.where(ok[:, None], t, fb)
    return t, b, ok


def rasterize(mesh: Mesh, layout: SceneLayout | None, camera: Camera) -> GBuffer:
    """Nearest-hit visibility of mesh (double-sided) and room (single-sided)."""
    mesh_tris = mesh.triangles()
    n_mesh = len(mesh_tris)
    tris, cull, surf = mesh_tris, np.zeros(n_mesh, bool), np.full(n_mesh, -1)
    if layout is not None:
        room, ids = layout.room_triangles()
        tris = np.concatenate([mesh_tris, room])
        cull = np.concatenate([cull, np.ones(len(room), bool)])
        surf = np.concatenate([surf, ids])
    o, d = camera.rays()
    tri, t, bary = closest_hit(o, d, tris, cull)
    n = len(o)
    hit = tri >= 0
    is_mesh = hit & (tri < n_mesh)
    is_room = hit & ~is_mesh

    pos = np.where(hit[:, None], o + d * np.where(hit, t, 0)[:, None], 0.0)
    normal = np.zeros((n, 3))
    geo = np.zeros((n, 3))
    tangent = np.zeros((n, 3))
    bitangent = np.zeros((n, 3))
    uv = np.zeros((n, 2))
    part = np.full(n, -1, dtype=np.int64)
    surface = np.full(n, -1, dtype=np.int64)

    if np.any(is_mesh):
        f = tri[is_mesh]
        b = bary[is_mesh]
        corners = mesh.faces[f]
        nrm = np.einsum("pk,pkc->pc", b, mesh.normals[corners])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        uv[is_mesh] = np.einsum("pk,pkc->pc", b, mesh.uvs[corners])
        g = face_normals(mesh_tris[f])
        flip = np.einsum("pc,pc->p", g, d[is_mesh]) > 0
        g[flip] *= -1
        nrm[flip] *= -1
        ft, fb, _ = _tangent_frames(mesh_tris, mesh.uvs[mesh.faces], face_normals(mesh_tris))
        tt, bb = ft[f], fb[f]
        tt = tt - nrm * np.einsum("pc,pc->p", tt, nrm)[:, None]
        tt /= np.maximum(np.linalg.norm(tt, axis=1, keepdims=True), 1e-12)
        hand = np.sign(np.einsum("pc,pc->p", np.cross(nrm, tt), bb))
        hand[hand == 0] = 1.0
        bb = np.cross(nrm, tt) * hand[:, None]
        normal[is_mesh], geo[is_mesh] = nrm, g
        tangent[is_mesh], bitangent[is_mesh] = tt, bb
        part[is_mesh] = mesh.part_ids[f]
    if np.any(is_room):
        s = surf[tri[is_room]]
        surface[is_room] = s
        qn = np.stack([quad_normal(q) for q in layout.surfaces()])
        normal[is_room] = geo[is_room] = qn[s]

    _, _, fwd = camera.basis()
    depth = np.where(hit, (pos - camera.position) @ fwd, np.inf)
    return GBuffer(camera.resolution, pos, normal, geo, tangent, bitangent, uv, part,
                   surface, hit, depth, -d, camera)


def render_part_mask(mesh: Mesh, camera: Camera, part_id: int, gbuffer: GBuffer | None = None) -> np.ndarray:
    """Binary (H, W) mask of pixels where ``part_id`` is the nearest surface."""
    if not 0 <= part_id < mesh.n_parts:
        raise ValueError(f"part id {part_id} out of range [0, {mesh.n_parts})")
    gb = gbuffer if gbuffer is not None else rasterize(mesh, None, camera)
    return gb.image(gb.part_id == part_id)


def part_pixel_counts(mesh: Mesh, camera: Camera) -> np.ndarray:
    gb = rasterize(mesh, None, camera)
    return np.bincount(gb.part_id[gb.part_id >= 0], minlength=mesh.n_parts)


def render_conditions(mesh: Mesh, camera: Camera, gbuffer: GBuffer | None = None):
    """Depth in [0, 1] (near = 0) and camera-space normals encoded to [0, 1]; background 0."""
    gb = gbuffer if gbuffer is not None else rasterize(mesh, None, camera)
    hit = gb.part_id >= 0
    depth = np.zeros(len(hit))
    if np.any(hit):
        z = gb.depth[hit]
        span = z.max() - z.min()
        depth[hit] = (z - z.min()) / span if span > 1e-12 else 0.0
    r, u, f = camera.basis()
    ncam = np.stack([gb.normal @ r, gb.normal @ u, -(gb.normal @ f)], axis=1)
    enc = np.where(hit[:, None], 0.5 + 0.5 * ncam, 0.0)
    return gb.image(depth), gb.image(enc)
