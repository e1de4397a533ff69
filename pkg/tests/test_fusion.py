import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvtex.assets import quad_mesh, triangle_mesh
from mvtex.fusion import (OptimConfig, WeightField, blend_latent_texture, compute_view_weights, cross_view_variance,
                          dilate_fill, joint_objective, fuse_color, joint_optimize, optimize_latents, sample_views)
from mvtex.geometry import Texture, build_texel_table
from mvtex.models import make_codec
from mvtex.render import Camera, ViewSet, rasterize, sample_cameras


def one_texel_case(values, weights):
    """N single-pixel images all seeing the one texel of a 1x1 table."""
    table = build_texel_table(triangle_mesh(), (1, 1))
    n = len(values)
    field = WeightField(np.array(weights, float).reshape(n, 1, 1), np.zeros((n, 1, 1), dtype=np.int64))
    views = [np.full((1, 1, 3), v, dtype=float) for v in values]
    return views, field, table


def test_fuse_single_view_identity():
    views, field, table = one_texel_case([0.37], [0.6])
    assert fuse_color(views, field, table).data[0, 0, 0] == 0.37


def test_fuse_equal_weight_mean():
    views, field, table = one_texel_case([1.0, 0.0], [0.8, 0.8])
    assert fuse_color(views, field, table).data[0, 0, 0] == pytest.approx(0.5, abs=1e-6)


def test_fuse_weighted_example():
    views, field, table = one_texel_case([1.0, 0.4], [1.0, 0.5])
    assert fuse_color(views, field, table).data[0, 0, 0] == pytest.approx(0.8, abs=1e-6)


def test_fuse_uncovered_keeps_previous():
    views, field, table = one_texel_case([1.0], [0.0])
    prev = Texture(np.full((1, 1, 3), 0.2), table.valid)
    assert fuse_color(views, field, table, prev).data[0, 0, 0] == 0.2
    assert fuse_color(views, field, table).data[0, 0, 0] == 0.5


def test_single_camera_constant_red():
    q = quad_mesh(size=1.0)
    table = build_texel_table(q, (16, 16))
    cam = Camera(position=np.array([0, 0, 1.5]), image_size=(32, 32))
    field = compute_view_weights(table, [cam], [rasterize(q, cam)])
    red = np.zeros((32, 32, 3))
    red[..., 0] = 1.0
    tex = fuse_color([red], field, table)
    vis = field.covered
    assert vis.sum() == table.valid.sum()
    assert np.all(tex.data[vis] == [1.0, 0.0, 0.0])


def center_texel_weight(cam_pos):
    q = quad_mesh(size=1.0)
    table = build_texel_table(q, (9, 9))
    cam = Camera(position=np.asarray(cam_pos, float), image_size=(33, 33))
    return compute_view_weights(table, [cam], [rasterize(q, cam)]).weights[0, 4, 4]


def test_weight_examples():
    assert center_texel_weight([0, 0, 1.5]) == pytest.approx(1.0, abs=1e-12)
    a = np.radians(60)
    assert center_texel_weight([1.5 * np.sin(a), 0, 1.5 * np.cos(a)]) == pytest.approx(0.5, abs=1e-6)
    assert center_texel_weight([0, 0, -1.5]) == 0.0


def test_weights_zero_when_unseen(oracle_scene):
    f = oracle_scene.field
    assert np.all(f.weights[~f.visible] == 0)
    assert np.all(f.weights >= 0)
    wn = f.normalized()
    np.testing.assert_allclose(wn.sum(axis=0)[f.covered], 1.0, atol=1e-6)
    assert np.all(wn.sum(axis=0)[~f.covered] == 0)


@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_fused_inside_hull_and_order_free(seed, n):
    rng = np.random.default_rng(seed)
    table = build_texel_table(triangle_mesh(), (4, 4))
    weights = rng.random((n, 4, 4)) * (rng.random((n, 4, 4)) > 0.3)
    pixels = np.where(weights > 0, rng.integers(0, 36, (n, 4, 4)), -1)
    field = WeightField(weights, pixels)
    views = [rng.random((6, 6, 3)) for _ in range(n)]
    fused = fuse_color(views, field, table).data
    s = sample_views(views, field)
    cov = field.covered
    with np.errstate(invalid="ignore"):
        lo, hi = np.min(np.where(np.isnan(s), np.inf, s), axis=0), np.max(np.where(np.isnan(s), -np.inf, s), axis=0)
    assert np.all(fused[cov] >= lo[cov]) and np.all(fused[cov] <= hi[cov])
    order = rng.permutation(n)
    again = fuse_color([views[k] for k in order], field.reordered(order), table).data
    assert np.array_equal(fused, again)


def test_variance_of_two_views():
    views, field, table = one_texel_case([0.3, 0.5], [1.0, 1.0])
    assert cross_view_variance(views, field)[0] == pytest.approx(0.01, abs=1e-15)
    views, field, table = one_texel_case([0.3, 0.3, 0.3], [1.0, 0.2, 0.5])
    assert cross_view_variance(views, field)[0] == 0.0


def test_dilate_fill():
    valid = np.ones((3, 5), bool)
    valid[:, 4] = False
    data = np.zeros((3, 5, 1))
    data[:, 0] = 1.0
    painted = np.zeros((3, 5), bool)
    painted[:, 0] = True
    out = dilate_fill(Texture(data, valid), painted)
    np.testing.assert_allclose(out.data[:, :4, 0], 1.0)
    assert np.all(out.data[:, 4] == 0)  # invalid texels are never painted


@pytest.fixture(scope="module")
def affine():
    return make_codec("affine", (8, 8, 4), (32, 32, 3), 0)


def test_identity_fit_reaches_render(oracle_scene):
    sc = oracle_scene
    z0 = [p.target for p in sc.predictors]
    renders = sc.views.render(fuse_color(z0, sc.field, sc.table))
    fit = optimize_latents(z0, renders, sc.codec, OptimConfig(100, 0.01))
    assert fit.final.max() <= 1e-3


def test_fit_at_optimum_is_noop(affine, rng):
    z = rng.standard_normal((8, 8, 4))
    fit = optimize_latents([z], [affine.decode(z)], affine)
    assert fit.initial[0] == 0 and np.array_equal(fit.latents[0], z)


@pytest.mark.parametrize("seed", range(5))
def test_affine_fit_endpoint_descends(affine, seed):
    rng = np.random.default_rng(seed)
    z = [rng.standard_normal((8, 8, 4)) for _ in range(3)]
    targets = [rng.random((32, 32, 3)) for _ in range(3)]
    fit = optimize_latents(z, targets, affine, OptimConfig(20, 0.01))
    assert np.all(fit.final <= fit.initial)
    assert fit.trace.shape == (21, 3)


def test_descent_guard_retries(affine, rng):
    z = rng.standard_normal((8, 8, 4))
    target = affine.decode(z + 0.01 * rng.standard_normal(z.shape))
    fit = optimize_latents([z], [target], affine, OptimConfig(5, 50.0))  # absurd step size
    assert fit.retried == [0]
    assert fit.final[0] <= fit.initial[0]


def test_fit_workers_do_not_change_results(affine, rng):
    z = [rng.standard_normal((8, 8, 4)) for _ in range(4)]
    t = [rng.random((32, 32, 3)) for _ in range(4)]
    a = optimize_latents(z, t, affine, workers=1)
    b = optimize_latents(z, t, affine, workers=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.latents, b.latents))


@pytest.fixture(scope="module")
def small_views(cube):
    table = build_texel_table(cube, (32, 32))
    return ViewSet.build(cube, table, sample_cameras(2, 1.5, 30, 45, (32, 32)))


def test_joint_stationary_at_optimum(small_views):
    codec = make_codec("identity", (32, 32, 3), (32, 32, 3))
    rng = np.random.default_rng(0)
    tex = Texture(rng.random((32, 32, 3)), small_views.table.valid)
    z = small_views.render(tex)
    jf = joint_optimize(z, tex, small_views, codec)
    assert np.abs(jf.texture.data - tex.data).max() <= 1e-5
    assert max(np.abs(a - b).max() for a, b in zip(jf.latents, z)) <= 1e-5


def test_joint_beats_latent_only(small_views):
    codec = make_codec("affine", (8, 8, 4), (32, 32, 3), 0)
    rng = np.random.default_rng(1)
    z0 = [rng.standard_normal((8, 8, 4)) for _ in range(2)]
    field = compute_view_weights(small_views.table, small_views.cameras, small_views.depths)
    fused = fuse_color([codec.decode(z) for z in z0], field, small_views.table)
    cfg = OptimConfig(20, 0.01)
    alone = optimize_latents(z0, small_views.render(fused), codec, cfg)
    jf = joint_optimize(z0, fused, small_views, codec, cfg)
    frozen = joint_objective(alone.latents, z0, fused, small_views, codec)
    assert jf.trace[-1] == pytest.approx(joint_objective(jf.latents, z0, jf.texture, small_views, codec))
    assert jf.trace[-1] < frozen


def test_blend_constant_views_roundtrip(small_views):
    field = compute_view_weights(small_views.table, small_views.cameras, small_views.depths)
    z = [np.full((32, 32, 4), 0.7)] * 2
    _, zb = blend_latent_texture(z, small_views, field)
    assert all(np.array_equal(a, b) for a, b in zip(zb, z))
    _, zb1 = blend_latent_texture(z[:1], small_views.reordered([0]), field.reordered([0]))
    assert np.array_equal(zb1[0], z[0])
