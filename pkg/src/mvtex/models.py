"""Pluggable generative backends: noise predictors and latent<->image codecs.

Nothing here is trained. The oracle predictors have closed-form outputs that
make the sampler land on known targets; the toy denoiser and the seeded
codecs are fixed random maps that exercise the same code paths as a real
latent diffusion model would.
"""
from __future__ import annotations

import functools
import hashlib
import warnings
from typing import Protocol

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from .render import DepthMap
from .schedule import NoiseSchedule, make_schedule

EMBED_DIM = 16


def embed_prompt(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit vector seeded by a hash of the prompt text."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class NoisePredictor(Protocol):
    def predict(self, z_t: np.ndarray, t: int, depth: DepthMap | None, h: np.ndarray,
                guidance_weight: float = 1.0) -> np.ndarray: ...


class LatentCodec(Protocol):
    latent_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]

    def decode(self, z: np.ndarray) -> np.ndarray: ...

    def decode_vjp(self, z: np.ndarray, g: np.ndarray) -> np.ndarray: ...

    def encode(self, x: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------- predictors


class OraclePredictor:
    """Exact posterior-mean denoiser for latents distributed as N(target, spread^2 I).

    With spread 0 the implied clean prediction is the target at every
    timestep, so a deterministic DDIM chain ends exactly on it. A positive
    spread makes the prediction follow z_t as the noise level drops, like a
    real denoiser does.
    """

    def __init__(self, target: np.ndarray, schedule: NoiseSchedule, spread: float = 0.0):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule
        self.spread = float(spread)

    def z0(self, z_t, t):
        ab = self.schedule.alpha_bars[t]
        if self.spread == 0:
            return self.target
        s2 = self.spread ** 2
        k = np.sqrt(ab) * s2 / (ab * s2 + 1 - ab)
        return self.target + k * (z_t - np.sqrt(ab) * self.target)

    def predict(self, z_t, t, depth=None, h=None, guidance_weight=1.0):
        ab = self.schedule.alpha_bars[t]
        if ab >= 1.0:
            return np.zeros_like(z_t)
        return (z_t - np.sqrt(ab) * self.z0(z_t, t)) / np.sqrt(1 - ab)


def oracle_predictor(target_z0, schedule: NoiseSchedule) -> OraclePredictor:
    return OraclePredictor(target_z0, schedule)


def view_oracle_predictors(target_texture, views, codec: "LatentCodec", schedule: NoiseSchedule,
                           spread: float = 0.0) -> list[OraclePredictor]:
    """One oracle per camera whose target is the encoded render of a known texture."""
    return [OraclePredictor(codec.encode(img), schedule, spread) for img in views.render(target_texture)]


class PromptRouter:
    """Dispatches to a per-prompt predictor by matching the prompt embedding."""

    def __init__(self, predictors: dict[str, NoisePredictor]):
        self.entries = [(embed_prompt(p), pred) for p, pred in predictors.items()]

    def predict(self, z_t, t, depth, h, guidance_weight=1.0):
        for e, pred in self.entries:
            if np.array_equal(e, h):
                return pred.predict(z_t, t, depth, h, guidance_weight)
        raise KeyError("no predictor registered for this prompt embedding")


def depth_features(depth: DepthMap | None, grid: tuple[int, int]) -> np.ndarray:
    """Mean inverse depth and coverage per latent cell, shape (h, w, 2)."""
    h, w = grid
    if depth is None:
        return np.zeros((h, w, 2))
    d = depth.depth
    H, W = d.shape
    inv = np.where(np.isfinite(d), 1.0 / np.where(np.isfinite(d), d, 1.0), 0.0)
    cov = np.isfinite(d).astype(np.float64)
    if H % h == 0 and W % w == 0:
        sh, sw = H // h, W // w
        inv = inv.reshape(h, sh, w, sw).mean(axis=(1, 3))
        cov = cov.reshape(h, sh, w, sw).mean(axis=(1, 3))
    else:
        r = ((np.arange(h) + 0.5) * H / h).astype(int)
        c = ((np.arange(w) + 0.5) * W / w).astype(int)
        inv, cov = inv[np.ix_(r, c)], cov[np.ix_(r, c)]
    return np.stack([inv, cov], axis=-1)


class ToyDenoiser:
    """Fixed random per-cell MLP of (z_t, time, depth, prompt).

    The network guesses a clean latent mu in [-1, 1]; the returned noise is the
    one that makes the DDIM clean estimate equal mu, clipped to +-``scale``.
    This keeps untrained chains in a sane colour range.
    """

    def __init__(self, seed: int, latent_shape, timesteps: int = 1000, hidden: int = 32, scale: float = 10.0,
                 schedule: NoiseSchedule | None = None):
        self.latent_shape = tuple(latent_shape)
        c = self.latent_shape[2]
        self.timesteps = timesteps
        self.scale = scale
        self.alpha_bars = (schedule or make_schedule(timesteps, num_steps=1)).alpha_bars
        rng = np.random.default_rng(seed)
        n_in = c + 4 + 2 + 4
        self.prompt_proj = rng.standard_normal((EMBED_DIM, 4))
        self.w1 = rng.standard_normal((n_in, hidden)) / np.sqrt(n_in)
        self.b1 = 0.1 * rng.standard_normal(hidden)
        self.w2 = rng.standard_normal((hidden, c)) / np.sqrt(hidden)
        self.b2 = 0.1 * rng.standard_normal(c)
        self.null = embed_prompt("")

    def clean_guess(self, z_t, t, feats, h):
        hgt, wid, _ = z_t.shape
        tau = t / self.timesteps
        temb = np.array([np.sin(np.pi * tau), np.cos(np.pi * tau), np.sin(3 * np.pi * tau), np.cos(3 * np.pi * tau)])
        p = h @ self.prompt_proj
        x = np.concatenate([z_t, np.broadcast_to(temb, (hgt, wid, 4)), feats,
                            np.broadcast_to(p, (hgt, wid, 4))], axis=-1)
        hid = np.tanh(x @ self.w1 + self.b1)
        return np.tanh(hid @ self.w2 + self.b2)

    def _eps(self, z_t, t, feats, h):
        a = self.alpha_bars[t]
        if a >= 1.0:
            return np.zeros_like(z_t, dtype=np.float64)
        raw = (z_t - np.sqrt(a) * self.clean_guess(z_t, t, feats, h)) / np.sqrt(1.0 - a)
        return np.clip(raw, -self.scale, self.scale)

    def predict(self, z_t, t, depth, h, guidance_weight=1.0):
        feats = depth_features(depth, z_t.shape[:2])
        cond = self._eps(z_t, t, feats, h)
        if guidance_weight == 1.0:
            return cond
        uncond = self._eps(z_t, t, feats, self.null)
        return uncond + guidance_weight * (cond - uncond)


def toy_denoiser(seed: int, latent_shape, timesteps: int = 1000) -> ToyDenoiser:
    return ToyDenoiser(seed, latent_shape, timesteps)


# -------------------------------------------------------------------- codecs


class IdentityCodec:
    def __init__(self, image_shape):
        self.image_shape = tuple(image_shape)
        self.latent_shape = self.image_shape

    def decode(self, z):
        return np.array(z, dtype=np.float64)

    def decode_vjp(self, z, g):
        return np.array(g, dtype=np.float64)

    def encode(self, x):
        return np.array(x, dtype=np.float64)


def identity_codec(image_shape) -> IdentityCodec:
    return IdentityCodec(image_shape)


class ConvCodec:
    """Seeded transposed-convolution decoder, optionally followed by a soft saturation.

    Each latent cell paints a 2s x 2s pixel patch (s = upsampling factor), so
    neighbouring cells overlap. The kernel is a tent (bilinear) colour map
    plus a seeded random part that gives every cell a fixed screen-space
    pattern. ``encode`` is the exact least-squares inverse of the affine part;
    for the saturating variant it is refined by a few gradient steps only,
    so it is deliberately not an exact inverse.
    """

    def __init__(self, latent_shape, image_shape, seed: int = 0, nonlinear: bool = False,
                 saturation: float = 0.6, pattern: float = 0.1, encode_iters: int = 10, bias: float = 0.5):
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)
        h, w, ci = self.latent_shape
        H, W, co = self.image_shape
        if H % h or W % w or H // h != W // w:
            raise ValueError("image size must be an integer multiple of the latent size")
        self.stride = s = H // h
        if s % 2:
            raise ValueError("upsampling factor must be even")
        if H * W * co < h * w * ci:
            raise ValueError("image must have at least as many values as the latent")
        self.nonlinear = nonlinear
        self.saturation = saturation
        self.encode_iters = encode_iters
        self.bias = bias
        self.pattern = pattern
        self.seed = seed
        for attempt in range(100):
            self._draw(seed + attempt)
            if self._factorize():
                if attempt:
                    warnings.warn(f"codec seed {seed} gave a rank-deficient map; using seed {seed + attempt}")
                self.seed = seed + attempt
                break
        else:
            raise RuntimeError("could not draw a full-rank codec")

    def _draw(self, seed):
        s = self.stride
        ci, co = self.latent_shape[2], self.image_shape[2]
        rng = np.random.default_rng(seed)
        k = np.arange(2 * s)
        tent = 1 - np.abs(k - (s - 0.5)) / s
        mix = np.zeros((ci, co))
        mix[: min(ci, co), : min(ci, co)] = np.eye(min(ci, co))
        mix += 0.2 * rng.standard_normal((ci, co))
        kernel = tent[:, None, None, None] * tent[None, :, None, None] * mix
        kernel = kernel + self.pattern * rng.standard_normal(kernel.shape) / s
        self.kernel = kernel
        kb = kernel.reshape(2, s, 2, s, ci, co)
        # per 2x2 block offset: (ci, s*s*co) matrices
        self._kmat = [[kb[p, :, q].transpose(2, 0, 1, 3).reshape(ci, s * s * co) for q in (0, 1)] for p in (0, 1)]

    def _factorize(self) -> bool:
        n = int(np.prod(self.latent_shape))
        self._gram_factor = None
        if n <= 8192:
            gram = np.empty((n, n))
            eye = np.eye(n)
            for a in range(0, n, 256):
                basis = eye[a:a + 256].reshape((-1,) + self.latent_shape)
                gram[a:a + 256] = self._lin_t(self._lin(basis)).reshape(-1, n)
            ev = np.linalg.eigvalsh(gram)
            if ev[0] <= 1e-10 * ev[-1]:
                return False
            self.lipschitz = float(ev[-1])
            self.min_eig = float(ev[0])
            self._gram_factor = cho_factor(gram)
        else:
            self.lipschitz = float(np.sum(np.abs(self.kernel)) ** 2)
            self.min_eig = float("nan")
        return True

    def _lin(self, z):
        """Transposed convolution, z (..., h, w, ci) -> (..., H, W, co) without bias."""
        h, w, _ = self.latent_shape
        s = self.stride
        co = self.image_shape[2]
        lead = z.shape[:-3]
        nl = len(lead)
        P = np.zeros(lead + (h + 1, s, w + 1, s, co))
        for p in (0, 1):
            for q in (0, 1):
                patch = (z @ self._kmat[p][q]).reshape(lead + (h, w, s, s, co))
                patch = patch.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
                P[..., p:p + h, :, q:q + w, :, :] += patch
        full = P.reshape(lead + ((h + 1) * s, (w + 1) * s, co))
        o = s // 2
        return full[..., o:o + h * s, o:o + w * s, :]

    def _lin_t(self, g):
        h, w, ci = self.latent_shape
        s = self.stride
        co = self.image_shape[2]
        lead = g.shape[:-3]
        nl = len(lead)
        o = s // 2
        full = np.zeros(lead + ((h + 1) * s, (w + 1) * s, co))
        full[..., o:o + h * s, o:o + w * s, :] = g
        P = full.reshape(lead + (h + 1, s, w + 1, s, co))
        out = np.zeros(lead + (h, w, ci))
        for p in (0, 1):
            for q in (0, 1):
                blk = P[..., p:p + h, :, q:q + w, :, :]
                blk = blk.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4).reshape(lead + (h, w, s * s * co))
                out += blk @ self._kmat[p][q].T
        return out

    def _squash(self, y):
        a = self.saturation
        return self.bias + a * np.tanh((y - self.bias) / a)

    def decode(self, z):
        y = self._lin(np.asarray(z, dtype=np.float64)) + self.bias
        return self._squash(y) if self.nonlinear else y

    def decode_vjp(self, z, g):
        g = np.asarray(g, dtype=np.float64)
        if self.nonlinear:
            y = self._lin(np.asarray(z, dtype=np.float64)) + self.bias
            g = g / np.cosh((y - self.bias) / self.saturation) ** 2
        return self._lin_t(g)

    def _solve_gram(self, rhs):
        if self._gram_factor is not None:
            return cho_solve(self._gram_factor, rhs.reshape(-1)).reshape(self.latent_shape)
        n = rhs.size
        op = LinearOperator((n, n), matvec=lambda v: self._lin_t(self._lin(v.reshape(self.latent_shape))).reshape(-1))
        sol, info = cg(op, rhs.reshape(-1), rtol=1e-12, maxiter=10 * n)
        return sol.reshape(self.latent_shape)

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = self._solve_gram(self._lin_t(x - self.bias))
        if self.nonlinear:
            step = 1.0 / self.lipschitz
            for _ in range(self.encode_iters):
                z = z - step * self.decode_vjp(z, self.decode(z) - x)
        return z


def affine_codec(latent_shape, image_shape, seed: int = 0) -> ConvCodec:
    return ConvCodec(latent_shape, image_shape, seed, nonlinear=False)


def nonlinear_codec(latent_shape, image_shape, seed: int = 0, encode_iters: int = 10) -> ConvCodec:
    return ConvCodec(latent_shape, image_shape, seed, nonlinear=True, encode_iters=encode_iters)


def make_codec(kind: str, latent_shape, image_shape, seed: int = 0) -> LatentCodec:
    if kind == "identity":
        if tuple(latent_shape) != tuple(image_shape):
            raise ValueError("identity codec needs latent shape == image shape")
        return IdentityCodec(image_shape)
    if kind not in ("affine", "nonlinear"):
        raise ValueError(f"unknown codec '{kind}'")
    return _cached_conv_codec(kind, tuple(latent_shape), tuple(image_shape), seed)


@functools.lru_cache(maxsize=8)
def _cached_conv_codec(kind, latent_shape, image_shape, seed):
    # codecs are immutable once built, and building one factorizes its Gram matrix
    return ConvCodec(latent_shape, image_shape, seed, nonlinear=kind == "nonlinear")
