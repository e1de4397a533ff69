"""Procedural test meshes that ship with UVs (no automatic unwrapping)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import Mesh, write_obj


def quad_mesh(uv_rect=(0.0, 0.0, 1.0, 1.0), size: float = 1.0) -> Mesh:
    """Square in the z=0 plane facing +z, two facets sharing the 0-2 diagonal."""
    h = size / 2
    verts = [[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0]]
    u0, v0, u1, v1 = uv_rect
    uvs = [[u0, v0], [u1, v0], [u1, v1], [u0, v1]]
    faces = [[0, 1, 2], [0, 2, 3]]
    return Mesh.from_arrays(verts, faces, uvs)


def triangle_mesh() -> Mesh:
    """Single facet whose UV triangle contains the whole unit square."""
    verts = [[-0.5, -0.5, 0], [1.5, -0.5, 0], [-0.5, 1.5, 0]]
    uvs = [[0, 0], [2, 0], [0, 2]]
    return Mesh.from_arrays(verts, [[0, 1, 2]], uvs)


# cube faces as (outward axis, sign); cells of a 4x2 UV layout, edges on multiples of 1/4 and 1/2
_CUBE_FACES = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]


def cube_mesh(size: float = 1.0) -> Mesh:
    """Axis-aligned cube, 12 facets, box unwrap into a 4x2 grid of UV cells.

    Cell edges sit on texel boundaries for any texture whose width is a
    multiple of 4 and height a multiple of 2.
    """
    h = size / 2
    verts, uvs, faces = [], [], []
    for k, (axis, sign) in enumerate(_CUBE_FACES):
        a, b = [ax for ax in range(3) if ax != axis]
        flip = sign * (-1 if axis == 1 else 1)  # e_a x e_b = -e_y for the y axis
        # corners ordered counterclockwise when seen from outside
        quad = []
        for s, t in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
            p = [0.0, 0.0, 0.0]
            p[axis] = sign * h
            p[a] = s * h
            p[b] = t * h * flip
            quad.append(p)
        base = len(verts)
        verts += quad
        cu, cv = k % 4, k // 4
        for s, t in [(0, 0), (1, 0), (1, 1), (0, 1)]:
            uvs.append([(cu + s) / 4, (cv + t) / 2])
        faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
    mesh = Mesh.from_arrays(verts, faces, uvs)
    centers = mesh.triangles().mean(axis=1)
    assert np.all(np.einsum("fi,fi->f", centers, mesh.normals) > 0)
    return mesh


def icosphere_mesh(subdivisions: int = 1, margin: float = 0.1) -> Mesh:
    """Unit-diameter icosphere with one UV cell per facet (per-face unwrap)."""
    t = (1 + 5 ** 0.5) / 2
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.array(v) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = np.array(verts[i]) + np.array(verts[j])
                verts.append(list(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    verts = np.array(verts) * 0.5
    n = len(faces)
    grid = int(np.ceil(np.sqrt(n)))
    cell = 1.0 / grid
    uvs, face_uvs = [], []
    for k in range(n):
        cu, cv = k % grid, k // grid
        u0, v0 = cu * cell, cv * cell
        lo, hi = margin * cell, (1 - margin) * cell
        uvs += [[u0 + lo, v0 + lo], [u0 + hi, v0 + lo], [u0 + lo, v0 + hi]]
        face_uvs.append([3 * k, 3 * k + 1, 3 * k + 2])
    mesh = Mesh.from_arrays(verts, faces, uvs, face_uvs)
    centers = mesh.triangles().mean(axis=1)
    assert np.all(np.einsum("fi,fi->f", centers, mesh.normals) > 0)
    return mesh


def uv_area(mesh: Mesh) -> float:
    uv = mesh.uv_triangles()
    e1, e2 = uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0]
    return float(np.sum(np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])) / 2)


ASSETS = {"quad": quad_mesh, "cube": cube_mesh, "icosphere": icosphere_mesh}


def write_assets(directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, make in ASSETS.items():
        path = directory / f"{name}.obj"
        write_obj(make(), path)
        out[name] = path
    return out
