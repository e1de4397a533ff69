"""Noise schedule and the DDPM / DDIM update rules.

Timestep 0 is clean data: ``alpha_bars[0] == 1`` and ``betas[0] == 0``; the
trained steps are 1..T. All formulas use the cumulative products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # (T + 1,)
    alphas: np.ndarray
    alpha_bars: np.ndarray
    steps: np.ndarray  # visited timesteps, descending, always starting at T

    def sigma(self, t: int, t_prev: int, eta: float = 0.0) -> float:
        """DDIM noise scale; eta=1 gives the DDPM posterior standard deviation."""
        if eta == 0:
            return 0.0
        ab, ab_prev = self.alpha_bars[t], self.alpha_bars[t_prev]
        return float(eta * np.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)))

    def prev(self, t: int) -> int:
        """Next visited timestep below t; 0 after the last one."""
        lower = self.steps[self.steps < t]
        return int(lower[0]) if len(lower) else 0

    def to_text(self) -> str:
        lines = ["t\tbeta\talpha\talpha_bar\tvisited"]
        visited = set(int(s) for s in self.steps)
        for t in range(self.T + 1):
            lines.append(f"{t}\t{self.betas[t]:.10g}\t{self.alphas[t]:.10g}\t{self.alpha_bars[t]:.10g}\t{int(t in visited)}")
        return "\n".join(lines) + "\n"


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2, num_steps: int = 35) -> NoiseSchedule:
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    if not 1 <= num_steps <= T:
        raise ValueError("need 1 <= num_steps <= T")
    alphas = 1.0 - np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    betas = 1.0 - alphas  # so that betas == 1 - alphas holds bit-exactly
    alpha_bars = np.cumprod(alphas)
    steps = np.array([int(round(k * T / num_steps)) for k in range(num_steps, 0, -1)], dtype=np.int64)
    for a in (betas, alphas, alpha_bars, steps):
        a.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, steps)


def ddim_predict_z0(z_t: np.ndarray, eps: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    ab = s.alpha_bars[t]
    return (z_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)


def ddim_mean(z0_bar, eps, t: int, t_prev: int, s: NoiseSchedule, eta: float = 0.0):
    sigma = s.sigma(t, t_prev, eta)
    ab_prev = s.alpha_bars[t_prev]
    rest = 1 - ab_prev - sigma ** 2
    if rest < -1e-12:
        raise ValueError(f"sigma^2 = {sigma ** 2:.3g} exceeds 1 - alpha_bar[{t_prev}] = {1 - ab_prev:.3g}")
    return np.sqrt(ab_prev) * z0_bar + np.sqrt(max(rest, 0.0)) * eps, sigma


def ddim_step(z0_bar, eps, t: int, t_prev: int, s: NoiseSchedule, eta: float = 0.0, rng=None) -> np.ndarray:
    """Re-noise a (possibly adjusted) clean prediction to level t_prev."""
    if not t_prev < t:
        raise ValueError("t_prev must be below t")
    mean, sigma = ddim_mean(z0_bar, eps, t, t_prev, s, eta)
    if sigma == 0:
        return mean
    if rng is None:
        raise ValueError("a generator is needed when eta > 0")
    return mean + sigma * rng.standard_normal(np.shape(mean))


def ddpm_mean(z_t, eps, t: int, s: NoiseSchedule, t_prev: int | None = None):
    """Ancestral mean; with a respaced subsequence the step's alpha is alpha_bar[t] / alpha_bar[t_prev]."""
    if t_prev is None:
        t_prev = t - 1
    alpha = s.alpha_bars[t] / s.alpha_bars[t_prev]
    beta = 1 - alpha
    return (z_t - beta / np.sqrt(1 - s.alpha_bars[t]) * eps) / np.sqrt(alpha), beta


def ddpm_step(z_t, eps, t: int, s: NoiseSchedule, rng, t_prev: int | None = None) -> np.ndarray:
    """One ancestral step with noise variance beta_t."""
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    mean, beta = ddpm_mean(z_t, eps, t, s, t_prev)
    if t_prev == 0 or (t_prev is None and t == 1):
        return mean
    return mean + np.sqrt(beta) * rng.standard_normal(np.shape(mean))


def forward_noise(z0: np.ndarray, t: int, s: NoiseSchedule, rng) -> tuple[np.ndarray, np.ndarray]:
    eps = rng.standard_normal(np.shape(z0))
    ab = s.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps, eps
