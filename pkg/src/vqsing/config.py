"""Flat key=value configuration with presets and dotted keys.

Settings come from three layers, later wins: preset defaults, a config
file of `key = value` lines, and `--set key=value` overrides. Dataclass
constructors pull their fields out of the flat dict by prefix.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import get_type_hints

from .errors import ConfigError


@dataclass
class TrainConfig:
    stage: str = "vqvae"
    iterations: int = 5000
    batch_size: int = 4
    crop_frames: int = 128
    commit_weight: float = 0.25
    ctc_weight: float = 0.10
    lr: float = 1e-4
    seed: int = 0
    ckpt_every: int = 1000
    eval_every: int = 500
    preset: str = "toy"
    float64: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.crop_frames % 4 != 0:
            raise ConfigError("crop_frames must be a multiple of 4")


# Desk-scale presets. "toy" targets the 8-clip overfit runs; "small" is a
# longer CPU run; paper-scale analysis defaults stay on AudioConfig itself.
PRESETS: dict[str, dict[str, str]] = {
    "default": {},
    "toy": {
        "audio.sample_rate": "8000",
        "audio.n_fft": "512",
        "audio.hop": "256",
        "audio.n_mels": "40",
        "audio.fmin": "50",
        "audio.fmax": "3800",
        "corpus.n_clips": "8",
        "corpus.min_seconds": "5.0",
        "corpus.max_seconds": "8.0",
        "vqvae.channels": "32",
        "vqvae.latent_dim": "16",
        "vqvae.codebook_size": "64",
        "vqvae.g3_blocks": "1",
        "vqvae.conv_groups": "4",
        "vqvae.norm_groups": "4",
        "lm.codebook_size": "64",
        "lm.enc_embed": "32",
        "lm.enc_channels": "64",
        "lm.enc_hidden": "32",
        "lm.attn_dim": "64",
        "lm.prenet_dim": "48",
        "lm.dec_embed": "32",
        "lm.dec_hidden": "128",
        "lm.mixed_dim": "96",
        "lm.mixed_layers": "2",
        "lm.mixed_ffn": "192",
        "lm.ups_embed": "48",
        "lm.ups_channels": "96",
        "lm.max_top_len": "128",
        "train.vqvae_iterations": "5000",
        "train.lm_iterations": "10000",
        "train.batch_size": "4",
        "train.crop_frames": "128",
        "train.lr": "0.001",
    },
    "small": {
        "audio.sample_rate": "16000",
        "audio.n_fft": "1024",
        "audio.hop": "256",
        "audio.n_mels": "64",
        "audio.fmin": "40",
        "audio.fmax": "7600",
        "corpus.n_clips": "64",
        "corpus.min_seconds": "5.0",
        "corpus.max_seconds": "12.0",
        "vqvae.channels": "64",
        "vqvae.latent_dim": "32",
        "vqvae.codebook_size": "256",
        "vqvae.g3_blocks": "2",
        "lm.codebook_size": "256",
        "lm.dec_hidden": "192",
        "lm.mixed_dim": "128",
        "lm.mixed_layers": "3",
        "lm.mixed_ffn": "256",
        "lm.max_top_len": "256",
        "train.vqvae_iterations": "30000",
        "train.lm_iterations": "30000",
        "train.batch_size": "4",
        "train.crop_frames": "192",
        "train.lr": "0.0005",
    },
}


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            raw = line.split("#", 1)[0].strip()
            if not raw:
                continue
            if "=" not in raw:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = raw.split("=", 1)
            out[key.strip()] = value.strip().strip("\"'")
    return out


def parse_set_overrides(items) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_settings(preset: str = "toy", config_file=None, overrides=None) -> dict[str, str]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    settings = dict(PRESETS[preset])
    settings["train.preset"] = preset
    if config_file:
        settings.update(parse_kv_file(config_file))
    if overrides:
        settings.update(overrides)
    return settings


def _coerce(raw: str, typ):
    if typ is bool or typ == "bool":
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    if typ is tuple or str(typ).startswith("tuple"):
        return tuple(int(x) for x in str(raw).split(",") if x != "")
    return str(raw)


def dataclass_from_flat(cls, prefix: str, settings: dict[str, str], **forced):
    """Build a dataclass from settings keys `prefix.field`, applying forced kwargs last."""
    hints = get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key in settings:
            kwargs[f.name] = _coerce(settings[key], hints.get(f.name, str))
    kwargs.update(forced)
    return cls(**kwargs)
