import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvtex.schedule import (ddim_mean, ddim_predict_z0, ddim_step, ddpm_mean, ddpm_step, forward_noise,
                            make_schedule)

# alpha_bar of the linear 1e-4..2e-2 ramp over 1000 steps, from a 50-digit decimal product
FROZEN_ALPHA_BAR = {1: 0.9999, 100: 0.897018145674960, 500: 0.0785872428817782, 1000: 4.03582976537568e-05}


@pytest.fixture(scope="module")
def sched():
    return make_schedule(1000, 1e-4, 2e-2, 35)


def test_default_schedule_values(sched):
    assert len(sched.steps) == 35
    assert sched.steps[0] == 1000 and sched.steps[1] == 971 and sched.steps[-1] == 29
    assert sched.alpha_bars[1000] < 0.01
    for t, v in FROZEN_ALPHA_BAR.items():
        assert sched.alpha_bars[t] == pytest.approx(v, rel=1e-12)


def test_schedule_invariants(sched):
    assert sched.alpha_bars[0] == 1.0 and sched.betas[0] == 0.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all(sched.betas == 1 - sched.alphas)
    assert np.all((sched.alphas > 0) & (sched.alphas <= 1))
    assert all(sched.sigma(t, sched.prev(t), 0.0) == 0 for t in sched.steps)


def test_full_subsequence_is_identity():
    s = make_schedule(50, 1e-3, 2e-2, 50)
    assert s.steps.tolist() == list(range(50, 0, -1))


def test_constant_beta_closed_form():
    b = 0.01
    s = make_schedule(100, b, b, 10)
    t = np.arange(101)
    np.testing.assert_allclose(s.alpha_bars, (1 - b) ** t, rtol=1e-12)


@pytest.mark.parametrize("args", [(100, 0.0, 0.1, 10), (100, 0.2, 0.1, 10), (100, 1e-3, 1.0, 10), (10, 1e-3, 0.1, 11)])
def test_schedule_errors(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_predict_examples(sched, rng):
    z0 = rng.standard_normal((4, 4, 4))
    zt, eps = forward_noise(z0, 500, sched, rng)
    np.testing.assert_allclose(ddim_predict_z0(zt, eps, 500, sched), z0, atol=1e-6)
    np.testing.assert_allclose(ddim_predict_z0(zt, 0 * eps, 500, sched), zt / np.sqrt(sched.alpha_bars[500]))
    assert np.array_equal(ddim_predict_z0(zt, eps, 0, sched), zt)


@given(st.integers(0, 1000), st.integers(0, 2 ** 31))
def test_inversion_identity(t, seed):
    s = make_schedule(1000, 1e-4, 2e-2, 35)
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((3, 3, 2)) * 2
    zt, eps = forward_noise(z0, t, s, rng)
    np.testing.assert_allclose(ddim_predict_z0(zt, eps, t, s), z0, atol=1e-6)


def test_ddim_step_examples(sched, rng):
    z0 = rng.standard_normal((4, 4, 4))
    out = ddim_step(z0, np.zeros_like(z0), 1000, 971, sched)
    np.testing.assert_array_equal(out, np.sqrt(sched.alpha_bars[971]) * z0)
    eps = rng.standard_normal(z0.shape)
    assert np.array_equal(ddim_step(z0, eps, 1000, 971, sched), ddim_step(z0, eps, 1000, 971, sched))


def test_ddim_step_errors(sched):
    z = np.zeros((2, 2, 1))
    with pytest.raises(ValueError):
        ddim_step(z, z, 500, 500, sched)
    with pytest.raises(ValueError):
        ddim_mean(z, z, 1000, 971, sched, eta=2.0)  # sigma^2 > 1 - alpha_bar_prev
    with pytest.raises(ValueError):
        ddim_step(z, z, 1000, 971, sched, eta=1.0)  # no generator


def test_ddim_eta_one_matches_ddpm_mean(sched, rng):
    z_t = rng.standard_normal((4, 4, 3))
    eps = rng.standard_normal(z_t.shape)
    for t in sched.steps[:-1]:
        t_prev = sched.prev(t)
        z0 = ddim_predict_z0(z_t, eps, t, sched)
        m_ddim, sigma = ddim_mean(z0, eps, t, t_prev, sched, eta=1.0)
        m_ddpm, beta = ddpm_mean(z_t, eps, t, sched, t_prev)
        np.testing.assert_allclose(m_ddim, m_ddpm, atol=1e-6)
        ab, abp = sched.alpha_bars[t], sched.alpha_bars[t_prev]
        assert sigma ** 2 == pytest.approx((1 - abp) / (1 - ab) * beta, rel=1e-10)


def test_oracle_chain_reaches_target(sched, rng):
    target = rng.standard_normal((4, 4, 4))
    z = rng.standard_normal(target.shape)
    for t in sched.steps:
        ab = sched.alpha_bars[t]
        eps = (z - np.sqrt(ab) * target) / np.sqrt(1 - ab)
        z = ddim_step(ddim_predict_z0(z, eps, t, sched), eps, t, sched.prev(t), sched)
    np.testing.assert_allclose(z, target, atol=1e-4)


def test_ddpm_examples(rng):
    s = make_schedule(1000, 1e-8, 2e-2, 1000)
    z = rng.standard_normal((4, 4, 2))
    mean, _ = ddpm_mean(z, rng.standard_normal(z.shape), 1, s)
    np.testing.assert_allclose(mean, z, atol=1e-3)  # beta_1 -> 0
    z0 = rng.standard_normal((4, 4, 2))
    z1, eps = forward_noise(z0, 1, s, rng)
    np.testing.assert_allclose(ddpm_mean(z1, eps, 1, s)[0], z0, atol=1e-6)
    a = ddpm_step(z, eps, 500, s, np.random.default_rng(3))
    b = ddpm_step(z, eps, 500, s, np.random.default_rng(3))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        ddpm_step(z, eps, 0, s, rng)


def test_forward_noise_variance(sched):
    rng = np.random.default_rng(7)
    zt, _ = forward_noise(np.zeros(100_000), 500, sched, rng)
    assert zt.var() == pytest.approx(1 - sched.alpha_bars[500], rel=0.02)
    near, _ = forward_noise(np.ones(8), 0, sched, rng)
    np.testing.assert_allclose(near, 1.0)


def test_schedule_text(sched):
    text = sched.to_text()
    assert text.count("\n") == 1002
    assert "1000\t0.02\t0.98" in text
