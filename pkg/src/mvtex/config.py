"""Run configuration: one flat dataclass, read from an INI-style key=value file.

Section headers only group keys; a key placed under the wrong section is an
error, as is any unknown key.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .fusion import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # mesh
    mesh: str = "builtin:cube"
    normalize: bool = True
    # prompt
    prompt: str = "a wooden crate"
    prompts: str = ""  # per-camera prompts separated by ';' (multi-prompt mode)
    guidance: float = 1.0
    # cameras
    cameras: int = 4
    radius: float = 1.5
    pitch: float = 30.0
    fov: float = 45.0
    image_size: int = 64
    # schedule
    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    steps: int = 10
    eta: float = 0.0
    # backend
    predictor: str = "toy"  # toy | oracle
    codec: str = "affine"  # identity | affine | nonlinear
    latent_size: int = 16
    latent_channels: int = 4
    seed: int = 0
    oracle_spread: float = 0.0
    # optim
    opt_iters: int = 20
    opt_lr: float = 0.01
    opt_weight_decay: float = 0.0
    sgd_iters: int = 500
    sgd_lr: float = 0.001
    # texture
    texture_size: int = 128
    latent_texture_size: int = 32
    background: float = 0.5
    texel_sampling: str = "bilinear"  # bilinear | nearest
    # mode
    sampler: str = "ddim"  # ddim | ddpm
    fusion: str = "color"  # color | latent | none
    latent_update: str = "optimize"  # optimize | encode
    joint: bool = False
    # run
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(self.cameras >= 1, "cameras", "need at least one camera")
        need(self.image_size >= 1, "image_size", "must be positive")
        need(self.texture_size >= 1, "texture_size", "must be positive")
        need(self.latent_size >= 1 and self.latent_channels >= 1, "latent_size", "must be positive")
        need(self.predictor in ("toy", "oracle"), "predictor", "must be toy or oracle")
        need(self.codec in ("identity", "affine", "nonlinear"), "codec", "must be identity, affine or nonlinear")
        need(self.sampler in ("ddim", "ddpm"), "sampler", "must be ddim or ddpm")
        need(self.fusion in ("color", "latent", "none"), "fusion", "must be color, latent or none")
        need(self.texel_sampling in ("bilinear", "nearest"), "texel_sampling", "must be bilinear or nearest")
        need(self.latent_update in ("optimize", "encode"), "latent_update", "must be optimize or encode")
        need(0 < self.beta_min <= self.beta_max < 1, "beta_min", "need 0 < beta_min <= beta_max < 1")
        need(1 <= self.steps <= self.timesteps, "steps", "need 1 <= steps <= timesteps")
        need(self.eta >= 0, "eta", "must be non-negative")
        need(0 < self.fov < 180, "fov", "must lie in (0, 180)")
        need(self.radius > 0, "radius", "must be positive")
        need(self.workers >= 1, "workers", "must be at least 1")
        need(self.opt_iters >= 0 and self.sgd_iters >= 0, "opt_iters", "must be non-negative")
        if self.codec == "identity":
            need(self.latent_size == self.image_size and self.latent_channels == 3, "codec",
                 "identity codec needs latent_size == image_size and latent_channels == 3")
        else:
            need(self.image_size % self.latent_size == 0 and (self.image_size // self.latent_size) % 2 == 0,
                 "latent_size", "image_size must be an even multiple of latent_size")
        if self.prompts:
            need(len(self.prompt_list()) == self.cameras, "prompts",
                 f"need exactly one prompt per camera ({self.cameras}), got {len(self.prompt_list())}")

    def prompt_list(self) -> list[str]:
        if not self.prompts:
            return [self.prompt] * self.cameras
        return [p.strip() for p in self.prompts.split(";")]

    @property
    def image_shape(self):
        return (self.image_size, self.image_size, 3)

    @property
    def latent_shape(self):
        return (self.latent_size, self.latent_size, self.latent_channels)

    def opt_config(self) -> OptimConfig:
        return OptimConfig(self.opt_iters, self.opt_lr, self.opt_weight_decay)

    def sgd_config(self) -> OptimConfig:
        return OptimConfig(self.sgd_iters, self.sgd_lr)


SECTIONS = {
    "mesh": ["mesh", "normalize"],
    "prompt": ["prompt", "prompts", "guidance"],
    "cameras": ["cameras", "radius", "pitch", "fov", "image_size"],
    "schedule": ["timesteps", "beta_min", "beta_max", "steps", "eta"],
    "backend": ["predictor", "codec", "latent_size", "latent_channels", "seed", "oracle_spread"],
    "optim": ["opt_iters", "opt_lr", "opt_weight_decay", "sgd_iters", "sgd_lr"],
    "texture": ["texture_size", "latent_texture_size", "background", "texel_sampling"],
    "mode": ["sampler", "fusion", "latent_update", "joint"],
    "run": ["workers", "preset"],
}

PRESETS = {
    "desk": {},
    "paper-scale": {
        "cameras": 8, "radius": 1.5, "fov": 45.0, "pitch": 30.0, "steps": 35,
        "opt_iters": 20, "opt_lr": 0.01, "sgd_iters": 500,
        "image_size": 512, "latent_size": 64, "latent_channels": 4, "texture_size": 1024,
        "latent_texture_size": 256,
    },
    # exact oracle chains through an identity codec; useful for end-to-end checks
    "oracle": {"predictor": "oracle", "codec": "identity", "latent_size": 64, "latent_channels": 3},
}

_TYPES = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {typ}, got '{raw}'") from None


def config_from_items(items: dict[str, str]) -> RunConfig:
    items = dict(items)
    preset = items.pop("preset", "desk").strip()
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset '{preset}'")
    values = dict(PRESETS[preset])
    for key, raw in items.items():
        if key not in _TYPES:
            raise ConfigError(f"{key}: unknown key")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def _read_items(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    items = {}
    for section in parser.sections():
        if section != "__top__" and section not in SECTIONS:
            raise ConfigError(f"[{section}]: unknown section")
        for key, value in parser.items(section):
            if section != "__top__" and key not in SECTIONS[section]:
                owner = next((s for s, ks in SECTIONS.items() if key in ks), None)
                raise ConfigError(f"{key}: unknown key" if owner is None else f"{key}: belongs in [{owner}], not [{section}]")
            items[key] = value
    return items


def parse_config(path=None, overrides=(), echo_dir=None) -> RunConfig:
    """Load a config file (or none), apply key=value overrides, validate, optionally echo."""
    items = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        items = _read_items(path.read_text())
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override '{ov}' is not key=value")
        k, v = ov.split("=", 1)
        items[k.strip()] = v.strip()
    cfg = config_from_items(items)
    if echo_dir is not None:
        Path(echo_dir).mkdir(parents=True, exist_ok=True)
        (Path(echo_dir) / "config.ini").write_text(format_config(cfg))
    return cfg


def format_config(cfg: RunConfig) -> str:
    values = asdict(cfg)
    out = []
    for section, keys in SECTIONS.items():
        keys = [k for k in keys if k in values]
        if not keys:
            continue
        out.append(f"[{section}]")
        for k in keys:
            v = values[k]
            out.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        out.append("")
    return "\n".join(out)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
