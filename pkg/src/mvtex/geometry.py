"""Triangle meshes with UV maps, OBJ I/O and the texel table.

The texel table is the discrete form of the UV map: for every texel whose
center falls inside a UV triangle it stores the surface point and the facet
normal that texel paints.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FILL_VALUE = 0.5


class MeshError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def facet_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(length == 0):
        bad = int(np.flatnonzero(length[:, 0] == 0)[0])
        raise MeshError(f"facet {bad} has zero area")
    return n / length


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) indices into vertices
    uvs: np.ndarray  # (U, 2)
    face_uvs: np.ndarray  # (F, 3) indices into uvs
    normals: np.ndarray  # (F, 3) unit facet normals

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64).reshape(-1, 3))
        object.__setattr__(self, "uvs", _frozen(self.uvs, np.float64).reshape(-1, 2))
        object.__setattr__(self, "face_uvs", _frozen(self.face_uvs, np.int64).reshape(-1, 3))
        object.__setattr__(self, "normals", _frozen(self.normals, np.float64).reshape(-1, 3))
        nv, nu, nf = len(self.vertices), len(self.uvs), len(self.faces)
        if self.face_uvs.shape != self.faces.shape or len(self.normals) != nf:
            raise MeshError("faces, face_uvs and normals must have one row per facet")
        if nf and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise MeshError("facet vertex index out of range")
        if nf and (self.face_uvs.min() < 0 or self.face_uvs.max() >= nu):
            raise MeshError("facet uv index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("facet with repeated vertex index")
        if nf and np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-6):
            raise MeshError("facet normals must have unit length")

    @classmethod
    def from_arrays(cls, vertices, faces, uvs, face_uvs=None, normals=None) -> "Mesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if face_uvs is None:
            face_uvs = faces
        if normals is None:
            normals = facet_normals(vertices, faces) if len(faces) else np.zeros((0, 3))
        return cls(vertices, faces, uvs, face_uvs, normals)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """World-space corners, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def uv_triangles(self) -> np.ndarray:
        return self.uvs[self.face_uvs]

    def planes(self) -> np.ndarray:
        """Facet planes as (F, 4) rows (n, d) with n.p + d = 0."""
        d = -np.einsum("fi,fi->f", self.normals, self.vertices[self.faces[:, 0]])
        return np.concatenate([self.normals, d[:, None]], axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _parse_index(token: str, count: int, lineno: int) -> int:
    i = int(token)
    if i < 0:
        i = count + i
    else:
        i -= 1
    if not 0 <= i < count:
        raise MeshError(f"line {lineno}: index {token} out of range")
    return i


def load_mesh(path) -> Mesh:
    """Read the v/vt/vn/f subset of Wavefront OBJ.

    Polygons are fan-triangulated from their first corner. Every facet corner
    must reference a texture coordinate.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    verts, uvs, vns = [], [], []
    faces, face_uvs, face_vns = [], [], []
    ignored = {"o", "g", "s", "usemtl", "mtllib", "l", "vp"}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "v":
                verts.append([float(x) for x in rest[:3]])
                if len(rest) < 3:
                    raise ValueError
            elif head == "vt":
                uvs.append([float(x) for x in rest[:2]])
                if len(rest) < 2:
                    raise ValueError
            elif head == "vn":
                vns.append([float(x) for x in rest[:3]])
                if len(rest) < 3:
                    raise ValueError
            elif head == "f":
                if len(rest) < 3:
                    raise MeshError(f"line {lineno}: facet needs at least 3 corners")
                corners = []
                for tok in rest:
                    parts = tok.split("/")
                    if len(parts) < 2 or parts[1] == "":
                        raise MeshError(f"line {lineno}: facet corner '{tok}' has no texture coordinate")
                    vi = _parse_index(parts[0], len(verts), lineno)
                    ti = _parse_index(parts[1], len(uvs), lineno)
                    ni = _parse_index(parts[2], len(vns), lineno) if len(parts) > 2 and parts[2] else -1
                    corners.append((vi, ti, ni))
                for k in range(1, len(corners) - 1):
                    tri = (corners[0], corners[k], corners[k + 1])
                    faces.append([c[0] for c in tri])
                    face_uvs.append([c[1] for c in tri])
                    face_vns.append([c[2] for c in tri])
            elif head in ignored:
                continue
            else:
                raise MeshError(f"line {lineno}: unsupported statement '{head}'")
        except MeshError:
            raise
        except ValueError:
            raise MeshError(f"line {lineno}: cannot parse '{raw.strip()}'") from None

    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    normals = facet_normals(vertices, faces) if len(faces) else np.zeros((0, 3))
    # keep the file's orientation when it carries vertex normals
    for f, ids in enumerate(face_vns):
        if min(ids) >= 0:
            ref = np.sum([vns[i] for i in ids], axis=0)
            if np.dot(ref, normals[f]) < 0:
                faces[f] = faces[f][[0, 2, 1]]
                face_uvs[f] = [face_uvs[f][0], face_uvs[f][2], face_uvs[f][1]]
                normals[f] = -normals[f]
    return Mesh(vertices, faces, np.array(uvs).reshape(-1, 2), np.array(face_uvs).reshape(-1, 3), normals)


def write_obj(mesh: Mesh, path) -> None:
    lines = ["# generated by mvtex"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
    for k, (f, t) in enumerate(zip(mesh.faces, mesh.face_uvs)):
        lines.append("f " + " ".join(f"{f[j] + 1}/{t[j] + 1}/{k + 1}" for j in range(3)))
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_mesh(m: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale its longest edge to 1."""
    lo, hi = m.bounds()
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise MeshError("degenerate mesh: zero bounding-box extent")
    center = (lo + hi) / 2
    return Mesh((m.vertices - center) / extent, m.faces, m.uvs, m.face_uvs, m.normals)


@dataclass(frozen=True, eq=False)
class TexelTable:
    """Per-texel surface lookup. Row j, column i is the texel centered at
    uv = ((i + 0.5) / W, (j + 0.5) / H)."""

    resolution: tuple[int, int]  # (width, height)
    valid: np.ndarray  # (H, W) bool
    world: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3)
    facet: np.ndarray  # (H, W) int, -1 where invalid
    bary: np.ndarray  # (H, W, 3)

    @property
    def shape(self) -> tuple[int, int]:
        w, h = self.resolution
        return h, w

    def texel_center(self, j: int, i: int) -> tuple[float, float]:
        w, h = self.resolution
        return (i + 0.5) / w, (j + 0.5) / h


def _barycentric_2d(p, a, b, c):
    """Barycentric coordinates of points p (..., 2) in triangle abc."""
    v0, v1 = b - a, c - a
    d = v0[0] * v1[1] - v0[1] * v1[0]
    q = p - a
    l1 = (q[..., 0] * v1[1] - q[..., 1] * v1[0]) / d
    l2 = (v0[0] * q[..., 1] - v0[1] * q[..., 0]) / d
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def build_texel_table(m: Mesh, resolution: tuple[int, int]) -> TexelTable:
    w, h = int(resolution[0]), int(resolution[1])
    valid = np.zeros((h, w), dtype=bool)
    world = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))
    facet = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    tris = m.triangles()
    for f, uv in enumerate(m.uv_triangles()):
        px = uv * np.array([w, h])
        area = (px[1, 0] - px[0, 0]) * (px[2, 1] - px[0, 1]) - (px[2, 0] - px[0, 0]) * (px[1, 1] - px[0, 1])
        if area == 0:
            continue
        i0 = max(int(np.floor(px[:, 0].min() - 0.5)), 0)
        i1 = min(int(np.ceil(px[:, 0].max() - 0.5)), w - 1)
        j0 = max(int(np.floor(px[:, 1].min() - 0.5)), 0)
        j1 = min(int(np.ceil(px[:, 1].max() - 0.5)), h - 1)
        if i1 < i0 or j1 < j0:
            continue
        jj, ii = np.mgrid[j0:j1 + 1, i0:i1 + 1]
        centers = np.stack([ii + 0.5, jj + 0.5], axis=-1)
        b = _barycentric_2d(centers, px[0], px[1], px[2])
        inside = np.all(b >= -1e-12, axis=-1) & ~valid[j0:j1 + 1, i0:i1 + 1]
        if not inside.any():
            continue
        b = np.clip(b, 0.0, None)
        b /= b.sum(axis=-1, keepdims=True)
        sj, si = jj[inside], ii[inside]
        valid[sj, si] = True
        facet[sj, si] = f
        bary[sj, si] = b[inside]
        world[sj, si] = b[inside] @ tris[f]
        normal[sj, si] = m.normals[f]
    if not valid.any():
        warnings.warn("texel table is empty: no texel center lies inside a UV triangle", stacklevel=2)
    return TexelTable((w, h), _frozen(valid, bool), _frozen(world, np.float64), _frozen(normal, np.float64),
                      _frozen(facet, np.int64), _frozen(bary, np.float64))


@dataclass(eq=False)
class Texture:
    """Texel grid of any channel count; invalid texels carry the fill value."""

    data: np.ndarray  # (H, W, C)
    valid: np.ndarray  # (H, W) bool

    @classmethod
    def filled(cls, table: TexelTable, channels: int = 3, value: float = FILL_VALUE) -> "Texture":
        h, w = table.shape
        return cls(np.full((h, w, channels), value, dtype=np.float64), np.array(table.valid))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "Texture":
        return Texture(self.data.copy(), self.valid.copy())
