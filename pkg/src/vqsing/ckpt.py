"""Binary artifact formats.

Checkpoint container: 4-byte magic, a length-prefixed UTF-8 block of
`key=value` lines, u32 tensor count, then per tensor a u16-length name,
u8 rank, u32 dims, and little-endian float32 data. Codebooks ride along
with their EMA state. Code files: magic, u32 L, then L + 2L + 4L
little-endian u16 indices in top, middle, bottom order.
"""

from __future__ import annotations

import struct

import numpy as np

from . import nn
from .audio import AudioConfig
from .config import dataclass_from_flat
from .errors import ConfigError, InputError
from .lm import CodeTriple, LmConfig, LmModel
from .vqvae import LEVELS, VqvaeConfig, VqvaeModel

VQVAE_MAGIC = b"KVQ1"
LM_MAGIC = b"KLM1"
CODES_MAGIC = b"COD1"


def save_container(path, magic: bytes, config: dict[str, str],
                   tensors: dict[str, np.ndarray]) -> None:
    lines = "".join(f"{k}={v}\n" for k, v in sorted(config.items())).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(lines)))
        f.write(lines)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_container(path, magic: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        got = f.read(4)
        if got != magic:
            raise InputError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config: dict[str, str] = {}
        for line in f.read(cfg_len).decode("utf-8").splitlines():
            if line:
                k, v = line.split("=", 1)
                config[k] = v
        (count,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4")
            if data.size != n:
                raise InputError(f"{path}: truncated tensor {name!r}")
            tensors[name] = data.reshape(shape).astype(nn.default_dtype())
    return config, tensors


def write_codes(path, triple: CodeTriple) -> None:
    for arr in (triple.top, triple.middle, triple.bottom):
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise InputError("code index outside u16 range")
    with open(path, "wb") as f:
        f.write(CODES_MAGIC)
        f.write(struct.pack("<I", triple.top.size))
        for arr in (triple.top, triple.middle, triple.bottom):
            f.write(arr.astype("<u2").tobytes())


def read_codes(path) -> CodeTriple:
    with open(path, "rb") as f:
        got = f.read(4)
        if got != CODES_MAGIC:
            raise InputError(f"{path}: bad magic {got!r}, expected {CODES_MAGIC!r}")
        (top_len,) = struct.unpack("<I", f.read(4))
        payload = np.frombuffer(f.read(2 * 7 * top_len), dtype="<u2")
    if payload.size != 7 * top_len:
        raise InputError(f"{path}: truncated code payload")
    return CodeTriple(top=payload[:top_len].astype(np.int64),
                      middle=payload[top_len:3 * top_len].astype(np.int64),
                      bottom=payload[3 * top_len:].astype(np.int64))


# ---------------------------------------------------------------------------
# model-level save/load
# ---------------------------------------------------------------------------


def _audio_dict(cfg: AudioConfig) -> dict[str, str]:
    return {
        "audio.sample_rate": str(cfg.sample_rate), "audio.n_fft": str(cfg.n_fft),
        "audio.hop": str(cfg.hop), "audio.n_mels": str(cfg.n_mels),
        "audio.fmin": f"{cfg.fmin:g}", "audio.fmax": f"{cfg.fmax:g}",
        "audio.log_floor": f"{cfg.log_floor:g}", "fingerprint": cfg.fingerprint(),
    }


def _audio_from(config: dict[str, str]) -> AudioConfig:
    return dataclass_from_flat(AudioConfig, "audio", config)


def save_vqvae(path, model: VqvaeModel, audio_cfg: AudioConfig,
               alphabet: list[str]) -> None:
    config = dict(model.config_dict())
    config.update(_audio_dict(audio_cfg))
    config["alphabet"] = ",".join(alphabet)
    tensors = dict(model.state())
    for level in LEVELS:
        for key, arr in model.codebooks[level].state().items():
            tensors[f"codebook.{level}.{key}"] = arr
    save_container(path, VQVAE_MAGIC, config, tensors)


def load_vqvae(path) -> tuple[VqvaeModel, AudioConfig, list[str]]:
    config, tensors = load_container(path, VQVAE_MAGIC)
    cfg = dataclass_from_flat(VqvaeConfig, "vqvae", config)
    model = VqvaeModel(cfg, np.random.default_rng(0))
    model.load_state({k: v for k, v in tensors.items() if not k.startswith("codebook.")})
    for level in LEVELS:
        model.codebooks[level].load_state({
            key: tensors[f"codebook.{level}.{key}"]
            for key in ("prototypes", "ema_counts", "ema_sums")
        })
    alphabet = [p for p in config.get("alphabet", "").split(",") if p]
    return model, _audio_from(config), alphabet


def save_lm(path, model: LmModel, alphabet: list[str], fingerprint: str) -> None:
    config = dict(model.config_dict())
    config["alphabet"] = ",".join(alphabet)
    config["fingerprint"] = fingerprint
    save_container(path, LM_MAGIC, config, dict(model.state()))


def load_lm(path) -> tuple[LmModel, list[str], str]:
    config, tensors = load_container(path, LM_MAGIC)
    cfg = dataclass_from_flat(LmConfig, "lm", config)
    model = LmModel(cfg, np.random.default_rng(0))
    model.load_state(tensors)
    alphabet = [p for p in config.get("alphabet", "").split(",") if p]
    return model, alphabet, config.get("fingerprint", "")


def check_compatible(vq_model: VqvaeModel, lm_model: LmModel,
                     vq_fingerprint: str, lm_fingerprint: str) -> None:
    if vq_model.cfg.codebook_size != lm_model.cfg.codebook_size:
        raise ConfigError(
            f"codebook size mismatch: codec {vq_model.cfg.codebook_size}, "
            f"language model {lm_model.cfg.codebook_size}"
        )
    if lm_fingerprint and vq_fingerprint != lm_fingerprint:
        raise ConfigError(
            f"audio fingerprint mismatch: codec {vq_fingerprint!r}, "
            f"language model {lm_fingerprint!r}"
        )
