"""Pinhole cameras and a z-buffered software rasterizer.

Conventions: world up is +y; image rows grow downward; pixel (r, c) has its
center at (r + 0.5, c + 0.5) in continuous image coordinates. Depth is the
camera-space coordinate along the viewing axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Mesh, TexelTable, Texture

VIS_EPS = 1e-3
NEAR = 1e-4
BACKGROUND = 0.5


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov_y: float = 45.0
    image_size: tuple[int, int] = (64, 64)  # (width, height)
    index: int = 0  # stable identity; seeds per-view randomness

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        fwd = self.look_at - self.position
        if not np.linalg.norm(fwd) > 0:
            raise ValueError("camera position coincides with look_at")
        if not 0 < self.fov_y < 180:
            raise ValueError("fov_y must lie in (0, 180) degrees")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise ValueError("camera up vector is parallel to the view direction")
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def shape(self) -> tuple[int, int]:
        w, h = self.image_size
        return h, w

    @property
    def focal(self) -> float:
        return (self.image_size[1] / 2) / np.tan(np.radians(self.fov_y) / 2)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        return right, np.cross(right, fwd), fwd

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        right, up, fwd = self.basis()
        d = np.asarray(points) - self.position
        return np.stack([d @ right, d @ up, d @ fwd], axis=-1)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous (row, col) image coordinates and depth of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.image_size[0] / 2 + self.focal * pc[..., 0] / z
            row = self.image_size[1] / 2 - self.focal * pc[..., 1] / z
        return row, col, z

    def with_size(self, size: tuple[int, int]) -> "Camera":
        return replace(self, image_size=size)


def sample_cameras(count: int, radius: float = 1.5, pitch: float = 30.0, fov: float = 45.0,
                   size: tuple[int, int] = (64, 64)) -> list[Camera]:
    """Cameras on a sphere at fixed pitch, yaw = 0, 360/count, ... counterclockwise seen from +y."""
    if count < 1:
        raise ValueError("need at least one camera")
    cams = []
    p = np.radians(pitch)
    for k in range(count):
        yaw = np.radians(360.0 * k / count)
        pos = radius * np.array([np.cos(p) * np.sin(yaw), np.sin(p), np.cos(p) * np.cos(yaw)])
        cams.append(Camera(pos, fov_y=fov, image_size=size, index=k))
    return cams


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth (inf on background), the facet seen there and the facet planes."""

    depth: np.ndarray  # (H, W)
    facet: np.ndarray  # (H, W) int, -1 background
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics of the hit
    planes: np.ndarray  # (F, 4)
    camera: Camera

    @property
    def hit(self) -> np.ndarray:
        return self.facet >= 0


def rasterize(m: Mesh, c: Camera) -> DepthMap:
    h, w = c.shape
    depth = np.full((h, w), np.inf)
    facet = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    if m.num_faces:
        rows, cols, zs = c.project(m.triangles())
    for f in range(m.num_faces):
        z = zs[f]
        if np.any(z <= NEAR):
            continue
        r, q = rows[f], cols[f]
        area = (q[1] - q[0]) * (r[2] - r[0]) - (q[2] - q[0]) * (r[1] - r[0])
        if abs(area) < 1e-14:
            continue
        r0 = max(int(np.floor(r.min() - 0.5)), 0)
        r1 = min(int(np.ceil(r.max() - 0.5)), h - 1)
        c0 = max(int(np.floor(q.min() - 0.5)), 0)
        c1 = min(int(np.ceil(q.max() - 0.5)), w - 1)
        if r1 < r0 or c1 < c0:
            continue
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        pr, pc = rr + 0.5, cc + 0.5
        l1 = ((pc - q[0]) * (r[2] - r[0]) - (q[2] - q[0]) * (pr - r[0])) / area
        l2 = ((q[1] - q[0]) * (pr - r[0]) - (pc - q[0]) * (r[1] - r[0])) / area
        b = np.stack([1 - l1 - l2, l1, l2], axis=-1)
        inside = np.all(b >= -1e-9, axis=-1)
        if not inside.any():
            continue
        # perspective-correct interpolation
        bz = b / z
        inv = bz.sum(axis=-1)
        d = 1.0 / inv
        cur = depth[r0:r1 + 1, c0:c1 + 1]
        win = inside & (d < cur)  # strict: on equal depth the lower facet index stays
        if not win.any():
            continue
        sr, sc = rr[win], cc[win]
        depth[sr, sc] = d[win]
        facet[sr, sc] = f
        bary[sr, sc] = bz[win] / inv[win][:, None]
    return DepthMap(depth, facet, bary, m.planes() if m.num_faces else np.zeros((0, 4)), c)


def render_depth(m: Mesh, c: Camera) -> DepthMap:
    return rasterize(m, c)


def texel_lookup(m: Mesh, table: TexelTable, frags: DepthMap) -> np.ndarray:
    """Flat texel index fetched by each pixel (nearest texel), -1 on background.

    A hit whose nearest texel is invalid (its center falls just outside the UV
    triangle) is snapped to the closest valid texel of the same facet in the
    surrounding 5x5 block.
    """
    th, tw = table.shape
    out = np.full(frags.facet.shape, -1, dtype=np.int64)
    hit = frags.hit
    if not hit.any():
        return out
    f = frags.facet[hit]
    uv = np.einsum("nk,nkd->nd", frags.bary[hit], m.uv_triangles()[f])
    centroid = m.uv_triangles()[f].mean(axis=1)
    uv = uv + 1e-9 * (centroid - uv)  # points on a chart edge belong to the chart
    i = np.clip(np.floor(uv[:, 0] * tw).astype(np.int64), 0, tw - 1)
    j = np.clip(np.floor(uv[:, 1] * th).astype(np.int64), 0, th - 1)
    bad = np.flatnonzero(table.facet[j, i] != f)
    for n in bad:
        best, best_d = None, np.inf
        for dj in range(-2, 3):
            for di in range(-2, 3):
                jj, ii = j[n] + dj, i[n] + di
                if 0 <= jj < th and 0 <= ii < tw and table.facet[jj, ii] == f[n]:
                    d = ((ii + 0.5) / tw - uv[n, 0]) ** 2 + ((jj + 0.5) / th - uv[n, 1]) ** 2
                    if d < best_d:
                        best, best_d = (jj, ii), d
        if best is None:
            for dj in range(-2, 3):
                for di in range(-2, 3):
                    jj, ii = j[n] + dj, i[n] + di
                    if best is None and 0 <= jj < th and 0 <= ii < tw and table.valid[jj, ii]:
                        best = (jj, ii)
        if best is not None:
            j[n], i[n] = best
    out[hit] = j * tw + i
    return out


def gather(texture_data: np.ndarray, lookup: np.ndarray, background=BACKGROUND) -> np.ndarray:
    """Render by lookup: pixel values from the texel grid, background elsewhere."""
    ch = texture_data.shape[-1]
    flat = texture_data.reshape(-1, ch)
    img = np.empty(lookup.shape + (ch,))
    img[...] = background
    hit = lookup >= 0
    img[hit] = flat[lookup[hit]]
    return img


def render_color(m: Mesh, tex: Texture, table: TexelTable, c: Camera, background=BACKGROUND,
                 frags: DepthMap | None = None) -> np.ndarray:
    """Unlit render with nearest texel fetch; returns an (H, W, C) image."""
    if tex.resolution != table.resolution:
        raise ValueError(f"texture resolution {tex.resolution} does not match texel table {table.resolution}")
    if frags is None:
        frags = rasterize(m, c)
    return gather(tex.data, texel_lookup(m, table, frags), background)


def project_texels(table: TexelTable, c: Camera, depth: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    """Nearest pixel (flat index) of every texel's surface point and its visibility.

    The z-test compares the texel's depth with the depth of the surface stored
    at that pixel, evaluated along the ray through the texel point itself, so
    oblique facets do not fail the test because of sub-pixel offsets.
    Texels landing on a background pixel (silhouette edges) are not visible.
    """
    h, w = c.shape
    row, col, z = c.project(table.world)
    pix = np.full(table.shape, -1, dtype=np.int64)
    visible = np.zeros(table.shape, dtype=bool)
    ok = table.valid & (z > NEAR) & np.isfinite(row) & np.isfinite(col)
    ok &= (row >= 0) & (row < h) & (col >= 0) & (col < w)
    if not ok.any():
        return pix, visible
    r = np.floor(row[ok]).astype(np.int64)
    q = np.floor(col[ok]).astype(np.int64)
    r = np.minimum(r, h - 1)
    q = np.minimum(q, w - 1)
    flat = r * w + q
    pix[ok] = flat
    stored = depth.facet[r, q]
    zt = z[ok]
    occl_depth = np.full(zt.shape, np.inf)
    has = stored >= 0
    if has.any():
        plane_depth = _plane_depth(depth.planes[stored[has]], c.position, table.world[ok][has], zt[has])
        fallback = ~np.isfinite(plane_depth)
        plane_depth[fallback] = depth.depth[r[has][fallback], q[has][fallback]]
        occl_depth[has] = plane_depth
    # a background pixel carries no colour of the surface
    vis = has & (zt <= occl_depth + VIS_EPS)
    visible[ok] = vis
    pix[ok] = np.where(vis, flat, -1)
    return pix, visible


def _plane_depth(planes, origin, points, z):
    """Depth along the ray origin -> point at which each plane is crossed."""
    dirs = points - origin
    num = -(planes[:, :3] @ origin + planes[:, 3])
    den = np.einsum("ni,ni->n", planes[:, :3], dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den * z
    return np.where(np.abs(den) < 1e-12, np.nan, out)


def bilinear_taps(table: TexelTable, c: Camera, depth: DepthMap, visible: np.ndarray, pix: np.ndarray):
    """Four-pixel bilinear footprint of every visible texel's projection.

    Returns flat pixel indices (H, W, 4), -1 for unused taps, and weights that
    sum to one over the used taps. A tap is used only when the surface stored
    at that pixel passes through the texel point (same plane within VIS_EPS),
    so neighbouring pixels showing an occluder or another wall are skipped.
    Texels whose taps are all rejected fall back to their nearest pixel.
    """
    h, w = c.shape
    taps = np.full(table.shape + (4,), -1, dtype=np.int64)
    wts = np.zeros(table.shape + (4,))
    if not visible.any():
        return taps, wts
    row, col, z = c.project(table.world[visible])
    X = table.world[visible]
    y, x = row - 0.5, col - 0.5
    y0, x0 = np.floor(y).astype(np.int64), np.floor(x).astype(np.int64)
    fy, fx = y - y0, x - x0
    vt = np.full((len(z), 4), -1, dtype=np.int64)
    vw = np.zeros((len(z), 4))
    for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        yy, xx = y0 + dy, x0 + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yy, xx = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
        f = depth.facet[yy, xx]
        ok = inside & (f >= 0)
        pd = np.full(len(z), np.nan)
        if ok.any():
            pd[ok] = _plane_depth(depth.planes[f[ok]], c.position, X[ok], z[ok])
        ok &= np.abs(pd - z) <= VIS_EPS
        wt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
        vt[:, k] = np.where(ok, yy * w + xx, -1)
        vw[:, k] = np.where(ok, wt, 0.0)
    tot = vw.sum(axis=1)
    none = tot <= 0
    vt[none] = -1
    vt[none, 0] = pix[visible][none]
    vw[none] = 0.0
    vw[none, 0] = 1.0
    tot[none] = 1.0
    taps[visible] = vt
    wts[visible] = vw / tot[:, None]
    return taps, wts


def project_texel(table: TexelTable, c: Camera, depth: DepthMap, u: tuple[int, int]):
    """Pixel (row, col) seeing texel u = (row j, col i), or None when not visible."""
    j, i = u
    if not table.valid[j, i]:
        raise ValueError(f"texel {u} is not valid")
    pix, vis = project_texels(table, c, depth)
    if not vis[j, i]:
        return None
    return divmod(int(pix[j, i]), c.image_size[0])


@dataclass(frozen=True, eq=False)
class ViewSet:
    """Mesh, texel table and cameras with their fixed per-camera correspondences."""

    mesh: Mesh
    table: TexelTable
    cameras: tuple[Camera, ...]
    depths: tuple[DepthMap, ...]
    lookups: tuple[np.ndarray, ...]  # pixel -> flat texel
    background: float = BACKGROUND

    @classmethod
    def build(cls, mesh: Mesh, table: TexelTable, cameras, background=BACKGROUND) -> "ViewSet":
        cams = tuple(cameras)
        depths = tuple(rasterize(mesh, c) for c in cams)
        lookups = tuple(texel_lookup(mesh, table, d) for d in depths)
        return cls(mesh, table, cams, depths, lookups, background)

    def __len__(self):
        return len(self.cameras)

    def render(self, texture: Texture) -> list[np.ndarray]:
        if texture.resolution != self.table.resolution:
            raise ValueError("texture resolution does not match texel table")
        return [gather(texture.data, lk, self.background) for lk in self.lookups]

    def reordered(self, order) -> "ViewSet":
        order = list(order)
        return ViewSet(self.mesh, self.table, tuple(self.cameras[k] for k in order),
                       tuple(self.depths[k] for k in order), tuple(self.lookups[k] for k in order),
                       self.background)


def save_png(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] != 3:
        img = img[..., :3] if img.shape[2] > 3 else np.repeat(img[..., :1], 3, axis=2)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_depth_png(path, depth: DepthMap) -> tuple[float, float]:
    """16-bit grayscale normalized to the hit range; the range goes to a .txt sidecar."""
    d = depth.depth
    hit = np.isfinite(d)
    lo, hi = (float(d[hit].min()), float(d[hit].max())) if hit.any() else (0.0, 0.0)
    scale = (hi - lo) or 1.0
    arr = np.zeros(d.shape, dtype=np.uint16)
    arr[hit] = np.round((d[hit] - lo) / scale * 65534 + 1).astype(np.uint16)
    Image.fromarray(arr).save(path)
    Path(path).with_suffix(".txt").write_text(f"min={lo!r}\nmax={hi!r}\nbackground=0\n")
    return lo, hi
