"""Waveform <-> log-mel conversion and Griffin-Lim phase reconstruction.

All transforms are plain numpy and deterministic. Log-mel frames are
right-padded with the floor value to a multiple of 4 so the three codec
levels stay integrally aligned.
"""

from __future__ import annotations

import struct
import wave as wavmod
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

FRAME_MULTIPLE = 4


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 44100
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        if self.hop > self.n_fft:
            raise ConfigError(f"hop ({self.hop}) must be <= n_fft ({self.n_fft})")
        if self.n_mels >= self.n_fft // 2 + 1:
            raise ConfigError(f"n_mels ({self.n_mels}) must be < n_fft/2+1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin} fmax={self.fmax}"
            )
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def fingerprint(self) -> str:
        return (f"sr={self.sample_rate};n_fft={self.n_fft};hop={self.hop};"
                f"n_mels={self.n_mels};fmin={self.fmin:g};fmax={self.fmax:g};"
                f"log_floor={self.log_floor:g}")


@dataclass
class MelSpectrogram:
    """frames: (T, n_mels) natural-log magnitudes, T a multiple of 4."""

    frames: np.ndarray
    fingerprint: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InputError(f"mel frames must be (T>=1, n_mels), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """Triangular filters with HTK mel spacing, peak 1; shape (n_mels, n_fft/2+1)."""
    n_bins = cfg.n_fft // 2 + 1
    if cfg.fmax - cfg.fmin < 1.0:
        raise ConfigError(f"degenerate mel range [{cfg.fmin}, {cfg.fmax}]")
    points = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = points[m], points[m + 1], points[m + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    if not (fb.sum(axis=1) > 0).all():
        raise ConfigError("mel filterbank has an empty row; widen the range or lower n_mels")
    return fb


def filter_centers(cfg: AudioConfig) -> np.ndarray:
    """Peak frequency (Hz) of each mel filter."""
    points = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return points[1:-1]


def stft(waveform: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Center-padded STFT; returns complex (T, n_fft/2+1) with T = ceil(len/hop)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.size == 0:
        raise InputError("empty waveform")
    if x.size < cfg.n_fft:
        raise InputError(f"waveform length {x.size} shorter than n_fft {cfg.n_fft}")
    n_frames = -(-x.size // cfg.hop)
    half = cfg.n_fft // 2
    need = (n_frames - 1) * cfg.hop + cfg.n_fft
    x_pad = np.pad(x, (half, max(0, need - x.size - half)))
    stride = x_pad.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        x_pad, shape=(n_frames, cfg.n_fft), strides=(cfg.hop * stride, stride), writeable=False
    )
    return np.fft.rfft(frames * _hann(cfg.n_fft), axis=1)


def istft(spec: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Inverse of stft via windowed overlap-add; output length is T * hop."""
    n_frames = spec.shape[0]
    win = _hann(cfg.n_fft)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    buf = np.zeros(total)
    wsum = np.zeros(total)
    for t in range(n_frames):
        lo = t * cfg.hop
        buf[lo:lo + cfg.n_fft] += frames[t]
        wsum[lo:lo + cfg.n_fft] += win * win
    buf /= np.maximum(wsum, 1e-8)
    half = cfg.n_fft // 2
    out = buf[half:half + n_frames * cfg.hop]
    if out.size < n_frames * cfg.hop:
        out = np.pad(out, (0, n_frames * cfg.hop - out.size))
    return out


def stft_mel(waveform: np.ndarray, cfg: AudioConfig) -> MelSpectrogram:
    """Log-mel analysis: STFT magnitude -> mel filterbank -> ln with floor."""
    mag = np.abs(stft(waveform, cfg))
    mel = mag @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    n = logmel.shape[0]
    target = -(-n // FRAME_MULTIPLE) * FRAME_MULTIPLE
    if target > n:
        pad = np.full((target - n, cfg.n_mels), np.log(cfg.log_floor))
        logmel = np.vstack([logmel, pad])
    return MelSpectrogram(frames=logmel, fingerprint=cfg.fingerprint())


def griffin_lim(mel: MelSpectrogram, cfg: AudioConfig, n_iters: int = 60) -> np.ndarray:
    """Lift log-mel to linear magnitude via the filterbank pseudo-inverse, then
    estimate phase iteratively. Deterministic (zero-phase init)."""
    if n_iters < 1:
        raise ConfigError("n_iters must be >= 1")
    if mel.fingerprint and mel.fingerprint != cfg.fingerprint():
        raise ConfigError(
            f"mel fingerprint {mel.fingerprint!r} does not match config {cfg.fingerprint()!r}"
        )
    fb = mel_filterbank(cfg)
    mag_mel = np.exp(mel.frames)
    lin = np.clip(mag_mel @ np.linalg.pinv(fb).T, 0.0, None)
    x = istft(lin.astype(np.complex128), cfg)
    for _ in range(n_iters - 1):
        phase = np.angle(stft(x, cfg)[: lin.shape[0]])
        x = istft(lin * np.exp(1j * phase), cfg)
    return x


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def write_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    """16-bit PCM mono RIFF."""
    pcm = (np.clip(waveform, -1.0, 1.0) * 32767.0).astype("<i2")
    with wavmod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wavmod.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit mono PCM")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


MEL_MAGIC = b"MEL1"


def write_mel(path, mel: MelSpectrogram) -> None:
    """Binary mel file: magic, u32 T, u32 n_mels, then T*n_mels LE float32 by frame."""
    t, m = mel.frames.shape
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", t, m))
        f.write(mel.frames.astype("<f4").tobytes())


def read_mel(path, fingerprint: str = "") -> MelSpectrogram:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MEL_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected {MEL_MAGIC!r}")
        t, m = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * t * m), dtype="<f4")
    if data.size != t * m:
        raise InputError(f"{path}: truncated mel payload")
    return MelSpectrogram(frames=data.reshape(t, m).astype(np.float64),
                          fingerprint=fingerprint)
