"""Colour-space fusion of per-view predictions and the latent re-fitting steps.

Per denoising step every view's clean prediction is decoded, the decoded
images are averaged into one texture with cosine view weights, and each
view's latent is then fitted so that its decoded image matches the render of
that shared texture. Views only interact through the fused texture, so all
per-view work is independent.

Reductions over cameras are done on sorted values so that results do not
depend on camera order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import FILL_VALUE, TexelTable, Texture
from .optim import AdamWConfig, NonFiniteError, OptimizerState, adamw_step, l1_grad
from .render import ViewSet, bilinear_taps, gather, project_texels


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 20
    lr: float = 0.01
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def adamw(self, lr=None) -> AdamWConfig:
        return AdamWConfig(self.lr if lr is None else lr, self.betas, self.eps, self.weight_decay)


@dataclass(frozen=True, eq=False)
class WeightField:
    """Per-camera texel weights and where each texel is sampled in each image.

    ``pixels`` holds the nearest pixel (-1 when unseen). ``taps``/``tap_weights``
    optionally hold a bilinear footprint (N, H, W, 4); without them a texel
    reads its nearest pixel.
    """

    weights: np.ndarray  # (N, H, W)
    pixels: np.ndarray  # (N, H, W) flat pixel index
    taps: np.ndarray | None = None
    tap_weights: np.ndarray | None = None

    @property
    def visible(self) -> np.ndarray:
        return self.pixels >= 0

    @property
    def total(self) -> np.ndarray:
        return np.sort(self.weights, axis=0).sum(axis=0)

    @property
    def covered(self) -> np.ndarray:
        return self.total > 0

    def normalized(self) -> np.ndarray:
        tot = self.total
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(tot > 0, self.weights / np.where(tot > 0, tot, 1.0), 0.0)

    def reordered(self, order) -> "WeightField":
        order = list(order)
        if self.taps is None:
            return WeightField(self.weights[order], self.pixels[order])
        return WeightField(self.weights[order], self.pixels[order], self.taps[order], self.tap_weights[order])


def _fetched_pixels(table: TexelTable, cam, lookup: np.ndarray) -> np.ndarray:
    """For each texel some pixel of this view fetches, the fetching pixel nearest its projection."""
    out = np.full(table.shape, -1, dtype=np.int64)
    pix = np.flatnonzero(lookup >= 0)
    if not len(pix):
        return out
    tex = lookup.ravel()[pix]
    row, col, _ = cam.project(table.world.reshape(-1, 3)[tex])
    w = cam.shape[1]
    dist = (pix // w + 0.5 - row) ** 2 + (pix % w + 0.5 - col) ** 2
    order = np.lexsort((pix, dist, tex))
    tex, pix = tex[order], pix[order]
    first = np.ones(len(tex), dtype=bool)
    first[1:] = tex[1:] != tex[:-1]
    out.ravel()[tex[first]] = pix[first]
    return out


def compute_view_weights(table: TexelTable, cameras, depth_maps, bilinear: bool = True, lookups=None) -> WeightField:
    """w = max(0, <unit(camera - point), facet normal>), zero where the camera cannot see the texel.

    With ``lookups`` (pixel -> texel maps of the same views), a texel that a
    view's render fetches counts as seen by that view even when its own
    projection lands just off the silhouette; it is then sampled at the
    fetching pixel.
    """
    ws, ps, ts, tws = [], [], [], []
    for k, (cam, dm) in enumerate(zip(cameras, depth_maps)):
        pix, vis = project_texels(table, cam, dm)
        if lookups is not None:
            fetched = _fetched_pixels(table, cam, lookups[k])
            extra = ~vis & (fetched >= 0)
            pix = np.where(extra, fetched, pix)
            vis = vis | extra
        to_cam = cam.position - table.world
        dist = np.linalg.norm(to_cam, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            cos = np.einsum("hwi,hwi->hw", to_cam / np.where(dist > 0, dist, 1.0), table.normal)
        w = np.where(vis & (cos > 0), cos, 0.0)
        ws.append(w)
        ps.append(np.where(w > 0, pix, -1))
        if bilinear:
            t, tw = bilinear_taps(table, cam, dm, w > 0, pix)
            ts.append(t)
            tws.append(tw)
    if not bilinear:
        return WeightField(np.array(ws), np.array(ps))
    return WeightField(np.array(ws), np.array(ps), np.array(ts), np.array(tws))


def sample_views(views, field: WeightField) -> np.ndarray:
    """Colour each camera contributes to each texel, NaN where unseen. Shape (N, H, W, C)."""
    n, h, w = field.pixels.shape
    ch = views[0].shape[-1]
    out = np.full((n, h, w, ch), np.nan)
    for k, img in enumerate(views):
        vis = field.pixels[k] >= 0
        flat = img.reshape(-1, ch)
        if field.taps is None:
            out[k][vis] = flat[field.pixels[k][vis]]
            continue
        taps, tw = field.taps[k][vis], field.tap_weights[k][vis]
        # offsets from the heaviest tap, so a constant neighbourhood samples back exactly
        anchor = flat[np.take_along_axis(taps, tw.argmax(axis=1)[:, None], 1)[:, 0]]
        out[k][vis] = anchor + sum(tw[:, q, None] * (flat[np.maximum(taps[:, q], 0)] - anchor) for q in range(4))
    return out


def fuse_color(views, field: WeightField, table: TexelTable, previous: Texture | None = None,
               fill: float = FILL_VALUE) -> Texture:
    """Weighted average of the pixels every visible camera sees at each texel.

    The average is taken over visible cameras only. Texels no camera sees
    keep the value of ``previous`` (or ``fill``).
    """
    samples = sample_views(views, field)
    wn = field.normalized()
    covered = field.covered
    ref = np.nanmin(np.where(np.isnan(samples), np.inf, samples), axis=0)
    ref = np.where(np.isfinite(ref), ref, 0.0)
    contrib = np.where(np.isnan(samples), 0.0, wn[..., None] * (samples - ref))
    fused = ref + np.sort(contrib, axis=0).sum(axis=0)
    ch = fused.shape[-1]
    if previous is None:
        base = np.full(table.shape + (ch,), fill, dtype=np.float64)
    else:
        base = np.array(previous.data, dtype=np.float64)
    data = np.where(covered[..., None], fused, base)
    data[~table.valid] = fill
    return Texture(data, np.array(table.valid))


def cross_view_variance(views, field: WeightField, min_views: int = 2) -> np.ndarray:
    """Population variance across cameras of the sampled colours, channel-averaged.

    Returns a flat array over texels seen by at least ``min_views`` cameras.
    """
    samples = sample_views(views, field)
    count = field.visible.sum(axis=0)
    sel = count >= min_views
    if not sel.any():
        return np.zeros(0)
    s = samples[:, sel]  # (N, M, C)
    s = np.sort(np.where(np.isnan(s), np.inf, s), axis=0)
    s = np.where(np.isinf(s), np.nan, s)
    return np.nanvar(s, axis=0).mean(axis=-1)


def dilate_fill(texture: Texture, painted: np.ndarray, max_iters: int = 10_000) -> Texture:
    """Grow painted texels into unpainted valid texels (4-neighbour mean), one ring per pass."""
    data = texture.data.copy()
    done = painted & texture.valid
    todo = texture.valid & ~done
    for _ in range(max_iters):
        if not todo.any():
            break
        acc = np.zeros_like(data)
        cnt = np.zeros(done.shape)
        for dj, di in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            src = np.zeros_like(done)
            val = np.zeros_like(data)
            ys = slice(max(dj, 0), done.shape[0] + min(dj, 0))
            yd = slice(max(-dj, 0), done.shape[0] + min(-dj, 0))
            xs = slice(max(di, 0), done.shape[1] + min(di, 0))
            xd = slice(max(-di, 0), done.shape[1] + min(-di, 0))
            src[yd, xd] = done[ys, xs]
            val[yd, xd] = data[ys, xs]
            acc += np.where(src[..., None], val, 0.0)
            cnt += src
        grow = todo & (cnt > 0)
        if not grow.any():
            break
        data[grow] = acc[grow] / cnt[grow][:, None]
        done = done | grow
        todo = todo & ~grow
    return Texture(data, texture.valid.copy())


# --------------------------------------------------------------- latent fits


@dataclass
class LatentFit:
    latents: list
    trace: np.ndarray  # (iterations + 1, N) mean L1 per view
    retried: list = field(default_factory=list)

    @property
    def initial(self) -> np.ndarray:
        return self.trace[0]

    @property
    def final(self) -> np.ndarray:
        return self.trace[-1]


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _fit_one(z0, target, codec, cfg: OptimConfig, view: int):
    def run(lr):
        z = np.array(z0, dtype=np.float64)
        state = OptimizerState.zeros_like(z, cfg.adamw(lr))
        losses = []
        for _ in range(cfg.iterations):
            x = codec.decode(z)
            losses.append(float(np.abs(x - target).mean()))
            if not np.isfinite(losses[-1]):
                raise NonFiniteError(f"view {view}: non-finite latent fitting loss")
            z, state = adamw_step(z, codec.decode_vjp(z, l1_grad(x, target)), state)
        losses.append(float(np.abs(codec.decode(z) - target).mean()))
        if not np.isfinite(losses[-1]):
            raise NonFiniteError(f"view {view}: non-finite latent fitting loss")
        return z, losses

    z, losses = run(cfg.lr)
    retried = False
    if losses[-1] > losses[0]:
        retried = True
        z, losses = run(cfg.lr * 0.1)
        if losses[-1] > losses[0]:
            z, losses = np.array(z0, dtype=np.float64), [losses[0]] * (cfg.iterations + 1)
    return z, losses, retried


def optimize_latents(z0_hats, renders, codec, cfg: OptimConfig = OptimConfig(), workers: int = 1) -> LatentFit:
    """Fit each view's latent so its decoded image matches that view's render (mean L1, AdamW).

    ``renders`` are renders of the fused texture and stay fixed during the fit;
    every view starts from its own clean prediction.
    """
    out = _map(lambda z, r, k: _fit_one(z, r, codec, cfg, k),
               [(z, r, k) for k, (z, r) in enumerate(zip(z0_hats, renders))], workers)
    return LatentFit([o[0] for o in out], np.array([o[1] for o in out]).T, [k for k, o in enumerate(out) if o[2]])


def joint_objective(latents, z0_hats, texture: Texture, views: ViewSet, codec) -> float:
    """Sum over views of the decoded-vs-render L1 for the adjusted and the original latents."""
    total = 0.0
    for z, zh, r in zip(latents, z0_hats, views.render(texture)):
        total += np.abs(codec.decode(z) - r).mean() + np.abs(codec.decode(zh) - r).mean()
    return float(total)


@dataclass
class JointFit:
    latents: list
    texture: Texture
    trace: np.ndarray  # objective per iteration


def joint_optimize(z0_hats, texture_init: Texture, views: ViewSet, codec, cfg: OptimConfig = OptimConfig()) -> JointFit:
    """Fit latents and texture together.

    Texture gradients flow back through the fixed pixel -> texel lookup, so no
    differentiable renderer is needed: each pixel residual sign is scatter-added
    into the texel it was fetched from.
    """
    x_hat = [codec.decode(z) for z in z0_hats]
    zs = [np.array(z, dtype=np.float64) for z in z0_hats]
    zstate = [OptimizerState.zeros_like(z, cfg.adamw()) for z in zs]
    tex = np.array(texture_init.data, dtype=np.float64)
    tstate = OptimizerState.zeros_like(tex, cfg.adamw())
    ch = tex.shape[-1]
    ntex = tex.shape[0] * tex.shape[1]
    trace = []
    for it in range(cfg.iterations + 1):
        renders = [gather(tex, lk, views.background) for lk in views.lookups]
        xs = [codec.decode(z) for z in zs]
        obj = sum(np.abs(x - r).mean() + np.abs(xh - r).mean() for x, xh, r in zip(xs, x_hat, renders))
        if not np.isfinite(obj):
            raise NonFiniteError(f"joint fit: non-finite objective at iteration {it}")
        trace.append(float(obj))
        if it == cfg.iterations:
            break
        tgrads = []
        for k, (x, xh, r, lk) in enumerate(zip(xs, x_hat, renders, views.lookups)):
            g_bar = l1_grad(x, r)
            zg = codec.decode_vjp(zs[k], g_bar)
            zs[k], zstate[k] = adamw_step(zs[k], zg, zstate[k])
            g_r = -(g_bar + l1_grad(xh, r))
            hit = lk >= 0
            acc = np.zeros((ntex, ch))
            for c in range(ch):
                acc[:, c] = np.bincount(lk[hit], weights=g_r[..., c][hit], minlength=ntex)
            tgrads.append(acc)
        tg = np.sort(np.array(tgrads), axis=0).sum(axis=0).reshape(tex.shape)
        tex, tstate = adamw_step(tex, tg, tstate)
    return JointFit(zs, Texture(tex, texture_init.valid.copy()), np.array(trace))


def blend_latent_texture(latents, latent_views: ViewSet, field: WeightField, previous: Texture | None = None):
    """Ablation baseline: fuse the latents themselves into a latent texture and re-render it.

    Latent pixels whose texel no camera covers keep their own value.
    """
    tex = fuse_color(latents, field, latent_views.table, previous, fill=0.0)
    covered = field.covered.ravel()
    out = []
    for z, lk in zip(latents, latent_views.lookups):
        r = gather(tex.data, lk, 0.0)
        use = (lk >= 0) & covered[np.maximum(lk, 0)]
        out.append(np.where(use[..., None], r, z))
    return tex, out
