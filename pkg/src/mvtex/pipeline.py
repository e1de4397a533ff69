"""Multi-view texture painting: parallel DDIM chains coupled through colour fusion."""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import assets
from .config import RunConfig
from .fusion import (OptimConfig, WeightField, blend_latent_texture, compute_view_weights, cross_view_variance,
                     dilate_fill, fuse_color, joint_optimize, optimize_latents, sample_views)
from .geometry import Mesh, TexelTable, Texture, build_texel_table, load_mesh, normalize_mesh
from .models import OraclePredictor, ToyDenoiser, embed_prompt, make_codec
from .optim import NonFiniteError
from .render import ViewSet, sample_cameras
from .schedule import NoiseSchedule, ddim_predict_z0, ddim_step, ddpm_step, make_schedule

log = logging.getLogger(__name__)


def prompt_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(("target:" + text).encode()).digest()[:4], "little")


def procedural_texture(table: TexelTable, seed: int, amplitude: float = 0.2, frequency: float = 2.0,
                       base=0.5) -> Texture:
    """Smooth colour field of the surface point, so it is continuous across UV seams."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((3, 3))
    dirs *= frequency * np.pi / np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, 3)
    base = np.broadcast_to(np.asarray(base, dtype=np.float64), (3,))
    data = base + amplitude * np.sin(table.world @ dirs.T + phase)
    tex = Texture.filled(table)
    tex.data[table.valid] = data[table.valid]
    return tex


def load_config_mesh(spec: str, normalize: bool = True) -> Mesh:
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in assets.ASSETS:
            raise ValueError(f"mesh: unknown builtin mesh '{name}'")
        mesh = assets.ASSETS[name]()
    else:
        mesh = load_mesh(spec)
    return normalize_mesh(mesh) if normalize else mesh


@dataclass(eq=False)
class Scene:
    cfg: RunConfig
    views: ViewSet
    field: WeightField
    codec: object
    schedule: NoiseSchedule
    predictors: list
    embeddings: list
    prompts: list
    latent_views: ViewSet | None = None
    latent_field: WeightField | None = None

    @property
    def mesh(self) -> Mesh:
        return self.views.mesh

    @property
    def table(self) -> TexelTable:
        return self.views.table

    @property
    def cameras(self):
        return self.views.cameras

    def reordered(self, order) -> "Scene":
        order = list(order)
        pick = lambda xs: [xs[k] for k in order]
        return replace(self, views=self.views.reordered(order), field=self.field.reordered(order),
                       predictors=pick(self.predictors), embeddings=pick(self.embeddings), prompts=pick(self.prompts),
                       latent_views=None if self.latent_views is None else self.latent_views.reordered(order),
                       latent_field=None if self.latent_field is None else self.latent_field.reordered(order))


def build_scene(cfg: RunConfig, mesh: Mesh | None = None, codec=None, predictors=None, cameras=None) -> Scene:
    if mesh is None:
        mesh = load_config_mesh(cfg.mesh, cfg.normalize)
    table = build_texel_table(mesh, (cfg.texture_size, cfg.texture_size))
    if cameras is None:
        cameras = sample_cameras(cfg.cameras, cfg.radius, cfg.pitch, cfg.fov, (cfg.image_size, cfg.image_size))
    views = ViewSet.build(mesh, table, cameras, cfg.background)
    fld = compute_view_weights(table, views.cameras, views.depths, cfg.texel_sampling == "bilinear", views.lookups)
    if codec is None:
        codec = make_codec(cfg.codec, cfg.latent_shape, cfg.image_shape, seed=cfg.seed)
    schedule = make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max, cfg.steps)
    prompts = cfg.prompt_list() if len(cfg.prompt_list()) == len(views) else [cfg.prompt] * len(views)
    embeddings = [embed_prompt(p) for p in prompts]
    if predictors is None:
        if cfg.predictor == "toy":
            shared = ToyDenoiser(cfg.seed, codec.latent_shape, cfg.timesteps, schedule=schedule)
            predictors = [shared] * len(views)
        else:
            targets = {p: procedural_texture(table, prompt_seed(p)) for p in set(prompts)}
            renders = {p: views.render(t) for p, t in targets.items()}
            predictors = [OraclePredictor(codec.encode(renders[p][k]), schedule, cfg.oracle_spread)
                          for k, p in enumerate(prompts)]
    if len(predictors) != len(views):
        raise ValueError("need one predictor per camera")
    latent_views = latent_field = None
    if cfg.fusion == "latent":
        h, w, _ = codec.latent_shape
        ltable = build_texel_table(mesh, (cfg.latent_texture_size, cfg.latent_texture_size))
        latent_views = ViewSet.build(mesh, ltable, [c.with_size((w, h)) for c in views.cameras], 0.0)
        latent_field = compute_view_weights(ltable, latent_views.cameras, latent_views.depths,
                                            cfg.texel_sampling == "bilinear", latent_views.lookups)
    return Scene(cfg, views, fld, codec, schedule, list(predictors), embeddings, prompts, latent_views, latent_field)


@dataclass
class StepRecord:
    t: int
    variance_before: float  # cross-view variance of the decoded predictions
    variance_after: float  # after fusion and latent update
    fit_initial: float = float("nan")
    fit_final: float = float("nan")


@dataclass
class ConsistencyReport:
    mean_variance: float
    p95_variance: float
    shared_texels: int
    view_l1: list
    rerender_l1: float
    prompt_l1: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"mean_variance={self.mean_variance!r}", f"p95_variance={self.p95_variance!r}",
                 f"shared_texels={self.shared_texels}", f"rerender_l1={self.rerender_l1!r}"]
        for p, v in self.prompt_l1.items():
            lines.append(f"prompt_l1[{p}]={v!r}")
        lines += ["", "[view_l1]", "view,l1"]
        lines += [f"{k},{v!r}" for k, v in enumerate(self.view_l1)]
        return "\n".join(lines) + "\n"


def consistency_report(texture: Texture, final_views, views: ViewSet, fld: WeightField, prompts=None) -> ConsistencyReport:
    var = cross_view_variance(final_views, fld)
    renders = views.render(texture)
    view_l1 = [float(np.abs(r - v).mean()) for r, v in zip(renders, final_views)]
    prompt_l1 = {}
    if prompts is not None and len(set(prompts)) > 1:
        for p in dict.fromkeys(prompts):
            prompt_l1[p] = float(np.mean([l for l, q in zip(view_l1, prompts) if q == p]))
    return ConsistencyReport(float(var.mean()) if var.size else 0.0,
                             float(np.percentile(var, 95)) if var.size else 0.0,
                             int(var.size), view_l1, float(np.mean(view_l1)), prompt_l1)


def reconstruction_loss(texture: Texture, final_views, fld: WeightField) -> np.ndarray:
    """Per-texel weighted L1 between texel colour and the pixels the cameras see there."""
    samples = sample_views(final_views, fld)
    wn = fld.normalized()
    d = np.where(np.isnan(samples), 0.0, np.abs(texture.data[None] - samples))
    return np.sort(wn[..., None] * d, axis=0).sum(axis=0).sum(axis=-1)


def reconstruct_final_texture(final_views, fld: WeightField, table: TexelTable, sgd: OptimConfig = OptimConfig(500, 0.001),
                              init: Texture | None = None) -> Texture:
    """Fit texel colours to the final views by SGD on the weighted L1, then fill unseen texels.

    Starts from the fused texture. The problem separates per texel, so the
    best iterate of each texel is kept; the result never scores worse than
    the initialisation.
    """
    if init is None:
        init = fuse_color(final_views, fld, table)
    covered = fld.covered
    samples = sample_views(final_views, fld)[:, covered]  # (N, M, C) over covered texels only
    wn = np.broadcast_to(fld.normalized()[:, covered][..., None], samples.shape)
    # order the (weight, sample) pairs by value once, so every later sum over
    # cameras runs in an order that does not depend on camera order
    seen = ~np.isnan(samples)
    wn = np.where(seen, wn, 0.0)
    samples = np.where(seen, samples, 0.0)
    o = np.argsort(wn, axis=0, kind="stable")
    wn, samples = np.take_along_axis(wn, o, 0), np.take_along_axis(samples, o, 0)
    o = np.argsort(samples, axis=0, kind="stable")
    wn, samples = np.take_along_axis(wn, o, 0), np.take_along_axis(samples, o, 0)
    cur = np.array(init.data[covered], dtype=np.float64)
    best = cur.copy()
    best_loss = (wn * np.abs(cur[None] - samples)).sum(axis=0).sum(axis=-1)
    for _ in range(sgd.iterations):
        cur = cur - sgd.lr * (wn * np.sign(cur[None] - samples)).sum(axis=0)
        loss = (wn * np.abs(cur[None] - samples)).sum(axis=0).sum(axis=-1)
        better = loss < best_loss
        best[better] = cur[better]
        best_loss = np.where(better, loss, best_loss)
    data = np.array(init.data, dtype=np.float64)
    data[covered] = best
    return dilate_fill(Texture(data, init.valid.copy()), covered)


@dataclass
class RunResult:
    texture: Texture  # refined by the final reconstruction, unseen texels filled
    fused_texture: Texture  # colour fusion of the decoded predictions at t = 0
    final_views: list
    final_latents: list
    report: ConsistencyReport
    steps: list
    fused_history: list
    loss_traces: list  # (t, LatentFit trace) per step


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _check(arrays, what, t):
    for k, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite {what} at t={t}, view {k}")


def paint(cfg: RunConfig | None = None, scene: Scene | None = None, keep_history: bool = False) -> RunResult:
    """Run the coupled sampler and return the painted texture.

    Every visited step: predict noise per view, form the clean prediction,
    decode, fuse in colour space, then (except at t = 0) refit each view's
    latent to the render of the fused texture and re-noise it with the same
    noise prediction.
    """
    if scene is None:
        scene = build_scene(cfg)
    cfg = scene.cfg
    views, fld, codec, sched = scene.views, scene.field, scene.codec, scene.schedule
    n = len(views)
    workers = cfg.workers
    rngs = [np.random.default_rng(cfg.seed + cam.index) for cam in views.cameras]
    z = [rng.standard_normal(codec.latent_shape) for rng in rngs]
    prev_tex = Texture.filled(views.table)
    prev_latent_tex = None
    ts = [int(t) for t in sched.steps] + [0]
    records, history, traces = [], [], []
    opt = cfg.opt_config()
    fused_final = x = z0 = None
    for k, t in enumerate(ts):
        eps = _pmap(lambda zi, i: scene.predictors[i].predict(zi, t, views.depths[i], scene.embeddings[i], cfg.guidance),
                    [(z[i], i) for i in range(n)], workers)
        _check(eps, "noise prediction", t)
        if cfg.sampler == "ddim":
            z0 = [ddim_predict_z0(z[i], eps[i], t, sched) for i in range(n)]
        else:
            z0 = [np.array(zi) for zi in z]  # noisy latents are fused directly
        _check(z0, "latent", t)
        x = _pmap(codec.decode, [(zi,) for zi in z0], workers)
        fused = fuse_color(x, fld, views.table, prev_tex)
        prev_tex = fused
        if keep_history:
            history.append(fused)
        if t == 0:
            fused_final = fused
            break
        t_prev = ts[k + 1]
        var_before = cross_view_variance(x, fld)
        rec = StepRecord(t, float(var_before.mean()) if var_before.size else 0.0, float("nan"))
        if cfg.fusion == "color":
            if cfg.joint:
                jf = joint_optimize(z0, fused, views, codec, opt)
                zbar = jf.latents
                prev_tex = jf.texture
                rec.fit_initial, rec.fit_final = float(jf.trace[0]), float(jf.trace[-1])
            elif cfg.latent_update == "encode":
                zbar = _pmap(codec.encode, [(r,) for r in views.render(fused)], workers)
            else:
                fit = optimize_latents(z0, views.render(fused), codec, opt, workers)
                zbar = fit.latents
                rec.fit_initial, rec.fit_final = float(fit.initial.sum()), float(fit.final.sum())
                traces.append((t, fit.trace))
        elif cfg.fusion == "latent":
            prev_latent_tex, zbar = blend_latent_texture(z0, scene.latent_views, scene.latent_field, prev_latent_tex)
        else:
            zbar = z0
        _check(zbar, "adjusted latent", t)
        var_after = cross_view_variance([codec.decode(zb) for zb in zbar], fld)
        rec.variance_after = float(var_after.mean()) if var_after.size else 0.0
        records.append(rec)
        log.info("t=%d var %.3g -> %.3g", t, rec.variance_before, rec.variance_after)
        if cfg.sampler == "ddim":
            z = [ddim_step(zbar[i], eps[i], t, t_prev, sched, cfg.eta, rngs[i]) for i in range(n)]
        else:
            z = [ddpm_step(zbar[i], eps[i], t, sched, rngs[i], t_prev) for i in range(n)]
        _check(z, "latent", t_prev)
    refined = reconstruct_final_texture(x, fld, views.table, cfg.sgd_config(), fused_final)
    report = consistency_report(refined, x, views, fld, scene.prompts)
    return RunResult(refined, fused_final, x, z0, report, records, history, traces)


def paint_multiprompt(cfg: RunConfig, scene: Scene | None = None, **kw) -> RunResult:
    """Same sampler, each camera conditioned on its own prompt (``cfg.prompts``)."""
    if not cfg.prompts:
        raise ValueError("prompts: multi-prompt mode needs one prompt per camera")
    return paint(cfg, scene, **kw)


ABLATIONS = {
    "latent-blend": {"fusion": "latent"},
    "ddpm-fusion": {"sampler": "ddpm"},
    "direct-encode": {"latent_update": "encode"},
}


def ablation_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation '{variant}' (choose from {', '.join(ABLATIONS)})")
    return replace(cfg, **ABLATIONS[variant])


def run_ablation(cfg: RunConfig, variant: str, scene: Scene | None = None, **kw) -> RunResult:
    cfg = ablation_config(cfg, variant)
    if scene is None:
        scene = build_scene(cfg)
    else:
        scene = replace(scene, cfg=cfg)
        if variant == "latent-blend" and scene.latent_views is None:
            scene = _with_latent_views(scene)
    if variant == "direct-encode" and not callable(getattr(scene.codec, "encode", None)):
        raise ValueError("direct-encode needs a codec with an encoder")
    return paint(scene=scene, **kw)


def _with_latent_views(scene: Scene) -> Scene:
    cfg = scene.cfg
    h, w, _ = scene.codec.latent_shape
    ltable = build_texel_table(scene.mesh, (cfg.latent_texture_size, cfg.latent_texture_size))
    lv = ViewSet.build(scene.mesh, ltable, [c.with_size((w, h)) for c in scene.cameras], 0.0)
    lf = compute_view_weights(ltable, lv.cameras, lv.depths, cfg.texel_sampling == "bilinear", lv.lookups)
    return replace(scene, latent_views=lv, latent_field=lf)
