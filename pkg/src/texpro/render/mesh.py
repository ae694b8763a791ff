"""Triangle meshes with per-face part ids; Wavefront OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    """Unrolled triangle soup: vertex ``3*f + k`` is corner ``k`` of face ``f``."""

    vertices: np.ndarray        # (V, 3)
    faces: np.ndarray           # (F, 3) int
    normals: np.ndarray         # (V, 3) unit
    uvs: np.ndarray             # (V, 2) in [0, 1]
    part_ids: np.ndarray        # (F,) int
    part_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.part_ids = np.asarray(self.part_ids, dtype=np.int64).reshape(-1)
        nv = len(self.vertices)
        if len(self.faces) == 0:
            raise MeshError("mesh has no triangles")
        if self.faces.min() < 0 or self.faces.max() >= nv:
            raise MeshError("face index out of range")
        if len(self.normals) != nv or len(self.uvs) != nv:
            raise MeshError("normals/uvs must be per-vertex")
        if len(self.part_ids) != len(self.faces):
            raise MeshError("every triangle needs exactly one part id")
        if self.part_ids.min() < 0:
            raise MeshError("negative part id")
        lens = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-4):
            raise MeshError("vertex normals must be unit length")
        if not self.part_names:
            self.part_names = [f"part{i}" for i in range(self.n_parts)]

    @property
    def n_parts(self) -> int:
        return int(self.part_ids.max()) + 1

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def face_normals(tris: np.ndarray) -> np.ndarray:
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(ln > 0, ln, 1.0)


def box_project_uvs(tris: np.ndarray, part_ids: np.ndarray) -> np.ndarray:
    """Per-part box projection: each face is projected along its dominant axis."""
    uvs = np.zeros((len(tris), 3, 2))
    fn = face_normals(tris)
    axis = np.argmax(np.abs(fn), axis=1)
    for p in np.unique(part_ids):
        sel = part_ids == p
        pts = tris[sel].reshape(-1, 3)
        lo = pts.min(axis=0)
        span = max(float((pts.max(axis=0) - lo).max()), 1e-12)
        for f in np.flatnonzero(sel):
            a, b = [k for k in range(3) if k != axis[f]]
            local = (tris[f] - lo) / span
            uvs[f, :, 0] = local[:, a]
            uvs[f, :, 1] = local[:, b]
    return uvs.reshape(-1, 2)


def mesh_from_triangles(tris, part_ids, uvs=None, normals=None, part_names=None) -> Mesh:
    tris = np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    part_ids = np.asarray(part_ids, dtype=np.int64)
    nf = len(tris)
    if normals is None:
        normals = np.repeat(face_normals(tris), 3, axis=0)
    if uvs is None:
        uvs = box_project_uvs(tris, part_ids)
    return Mesh(tris.reshape(-1, 3), np.arange(3 * nf).reshape(nf, 3), normals, uvs,
                part_ids, list(part_names or []))


def box_triangles(lo, hi) -> np.ndarray:
    """12 outward-facing triangles of an axis-aligned box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c = np.array([[lo[0] if i & 1 == 0 else hi[0],
                   lo[1] if i & 2 == 0 else hi[1],
                   lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
    quads = [(0, 4, 6, 2), (1, 3, 7, 5),   # -x, +x
             (0, 1, 5, 4), (2, 6, 7, 3),   # -y, +y
             (0, 2, 3, 1), (4, 5, 7, 6)]   # -z, +z
    tris = []
    for a, b, cc, d in quads:
        tris.append([c[a], c[b], c[cc]])
        tris.append([c[a], c[cc], c[d]])
    return np.array(tris)


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def load_obj(path) -> Mesh:
    """Read a Wavefront OBJ; ``usemtl`` groups become parts in order of appearance."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise MeshError(f"cannot read mesh {path}: {exc}") from None
    pos, tex, nrm = [], [], []
    corners = []  # (vi, ti, ni, part)
    parts: dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                pos.append([float(x) for x in tok[1:4]])
            elif tok[0] == "vt":
                tex.append([float(x) for x in tok[1:3]])
            elif tok[0] == "vn":
                nrm.append([float(x) for x in tok[1:4]])
            elif tok[0] == "usemtl":
                name = " ".join(tok[1:]) or "default"
                current = parts.setdefault(name, len(parts))
            elif tok[0] == "f":
                if current is None:
                    current = parts.setdefault("default", len(parts))
                refs = [_parse_ref(r, len(pos), len(tex), len(nrm)) for r in tok[1:]]
                if len(refs) < 3:
                    raise MeshError("face with fewer than 3 vertices")
                for k in range(1, len(refs) - 1):  # fan triangulation
                    corners.append((refs[0], refs[k], refs[k + 1], current))
        except (ValueError, IndexError) as exc:
            raise MeshError(f"{path}:{lineno}: malformed line {raw!r} ({exc})") from None
    if not corners:
        raise MeshError(f"{path}: no faces")
    pos_a = np.array(pos, dtype=np.float64)
    tex_a = np.array(tex, dtype=np.float64).reshape(-1, 2)
    nrm_a = np.array(nrm, dtype=np.float64).reshape(-1, 3)
    tris = np.array([[pos_a[c[k][0]] for k in range(3)] for c in corners])
    part_ids = np.array([c[3] for c in corners])
    has_uv = all(c[k][1] is not None for c in corners for k in range(3))
    has_n = all(c[k][2] is not None for c in corners for k in range(3))
    uvs = None
    if has_uv:
        uvs = np.array([[tex_a[c[k][1]] for k in range(3)] for c in corners]).reshape(-1, 2)
        outside = (uvs < 0) | (uvs > 1)
        uvs = np.where(outside, np.mod(uvs, 1.0), uvs)  # textures tile
    normals = None
    if has_n:
        normals = np.array([[nrm_a[c[k][2]] for k in range(3)] for c in corners]).reshape(-1, 3)
        ln = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(ln == 0):
            normals = None
        else:
            normals = normals / ln
    names = sorted(parts, key=parts.get)
    return mesh_from_triangles(tris, part_ids, uvs, normals, names)


def _parse_ref(ref: str, npos: int, ntex: int, nnrm: int):
    bits = ref.split("/")

    def idx(s, n):
        if s == "":
            return None
        i = int(s)
        i = i - 1 if i > 0 else n + i
        if not 0 <= i < n:
            raise IndexError(f"index {s} out of range")
        return i

    vi = idx(bits[0], npos)
    ti = idx(bits[1], ntex) if len(bits) > 1 else None
    ni = idx(bits[2], nnrm) if len(bits) > 2 else None
    return vi, ti, ni


def save_obj(mesh: Mesh, path) -> None:
    lines = ["# texpro mesh"]
    for v in mesh.vertices:
        lines.append("v %.9g %.9g %.9g" % tuple(v))
    for t in mesh.uvs:
        lines.append("vt %.9g %.9g" % tuple(t))
    for n in mesh.normals:
        lines.append("vn %.9g %.9g %.9g" % tuple(n))
    for p in range(mesh.n_parts):
        lines.append(f"usemtl {mesh.part_names[p]}")
        for f in np.flatnonzero(mesh.part_ids == p):
            a, b, c = (mesh.faces[f] + 1).tolist()
            lines.append(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
