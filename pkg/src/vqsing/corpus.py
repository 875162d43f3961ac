"""Synthetic sung-phoneme corpus.

Each clip is a chain of held phonemes: voiced ones are harmonic stacks
under a per-phoneme formant template, unvoiced ones are shaped noise.
Pitch is piecewise constant per phoneme (notes carry over with some
probability) with sinusoidal vibrato on top. Ground-truth boundaries,
notes, and the vibrato phase are recorded, and a miniature lexicon in
the standard dictionary format is emitted alongside.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioConfig, read_wav, write_wav
from .errors import ConfigError, InputError

# name -> (voiced, [(center_hz, width_hz, gain), ...]); gains stay <= 2 so the
# fundamental keeps the largest harmonic under the k^-2 tilt
PHONEME_TEMPLATES: dict[str, tuple[bool, list[tuple[float, float, float]]]] = {
    "AA": (True, [(700.0, 130.0, 1.6), (1100.0, 180.0, 1.2)]),
    "EH": (True, [(600.0, 120.0, 1.5), (1800.0, 220.0, 1.2)]),
    "IY": (True, [(300.0, 90.0, 1.2), (2300.0, 250.0, 1.4)]),
    "OW": (True, [(450.0, 110.0, 1.6), (800.0, 150.0, 1.1)]),
    "UW": (True, [(325.0, 90.0, 1.7), (700.0, 140.0, 0.9)]),
    "M": (True, [(250.0, 80.0, 1.4), (1100.0, 300.0, 0.3)]),
    "N": (True, [(275.0, 85.0, 1.3), (1500.0, 300.0, 0.4)]),
    "L": (True, [(350.0, 100.0, 1.4), (1300.0, 250.0, 0.8)]),
    "S": (False, [(3200.0, 500.0, 1.0)]),
    "SH": (False, [(2200.0, 450.0, 1.0)]),
}

# stress digits on vowels exercise the lexicon's stripping rule
WORDS: dict[str, str] = {
    "LA": "L AA1", "LEE": "L IY1", "LOO": "L UW1", "LOW": "L OW1", "LEH": "L EH1",
    "MA": "M AA1", "ME": "M IY1", "MOO": "M UW1", "MOW": "M OW1", "MEH": "M EH1",
    "NA": "N AA1", "NEE": "N IY1", "NO": "N OW1", "NEW": "N UW1",
    "SAW": "S AA1", "SEE": "S IY1", "SO": "S OW1", "SUE": "S UW1",
    "SHAH": "SH AA1", "SHE": "SH IY1", "SHOW": "SH OW1",
    "A": "AA1", "E": "IY1", "O": "OW1", "U": "UW1",
    "L": "EH1 L", "M": "EH1 M", "N": "EH1 N", "S": "EH1 S",
}


@dataclass
class PhoneEvent:
    ph: str
    start: float
    end: float
    note_hz: float
    voiced: bool


@dataclass
class Clip:
    clip_id: str
    waveform: np.ndarray
    text: str
    phones: list[PhoneEvent]
    vibrato_phase: float

    @property
    def duration(self) -> float:
        return self.phones[-1].end if self.phones else 0.0


@dataclass
class CorpusSpec:
    n_clips: int = 8
    min_seconds: float = 5.0
    max_seconds: float = 15.0
    pitch_min_hz: float = 180.0
    pitch_max_hz: float = 330.0
    vibrato_rate_hz: float = 5.5
    vibrato_depth: float = 0.015
    min_phoneme_seconds: float = 0.3
    max_phoneme_seconds: float = 0.7
    note_change_prob: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1:
            raise ConfigError("n_clips must be positive")
        if not 0 < self.min_seconds < self.max_seconds:
            raise ConfigError("need 0 < min_seconds < max_seconds")
        if self.max_seconds - self.min_seconds < 2.5:
            raise ConfigError("clip length range must span at least 2.5 s")
        if not 0 < self.pitch_min_hz < self.pitch_max_hz:
            raise ConfigError("bad pitch range")
        if self.min_phoneme_seconds <= 0 or self.max_phoneme_seconds <= self.min_phoneme_seconds:
            raise ConfigError("bad phoneme duration range")


def write_mini_lexicon(path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(";;; miniature synthetic-singing lexicon\n")
        for word, prons in WORDS.items():
            f.write(f"{word}  {prons}\n")
        # an alternate that must lose to the first pronunciation
        f.write("LA(2)  L EH1\n")


def _template_envelope(freqs: np.ndarray, ph: str) -> np.ndarray:
    _, formants = PHONEME_TEMPLATES[ph]
    env = np.ones_like(freqs, dtype=np.float64)
    for center, width, gain in formants:
        env = env + gain * np.exp(-((freqs - center) / width) ** 2)
    return env


def _render_clip(spec: CorpusSpec, cfg: AudioConfig, rng: np.random.Generator,
                 clip_id: str) -> Clip:
    sr = cfg.sample_rate
    target = rng.uniform(spec.min_seconds, spec.max_seconds - 2.2)
    words: list[str] = []
    phones: list[tuple[str, float]] = []  # (name, duration)
    total = 0.0
    word_names = sorted(w for w in WORDS if len(w) > 1)  # lyric uses real words
    while total < target:
        word = word_names[rng.integers(0, len(word_names))]
        words.append(word)
        for token in WORDS[word].split():
            name = token.rstrip("0123456789")
            dur = rng.uniform(spec.min_phoneme_seconds, spec.max_phoneme_seconds)
            phones.append((name, dur))
            total += dur

    vibrato_phase = float(rng.uniform(0, 2 * np.pi))
    note = float(np.exp(rng.uniform(np.log(spec.pitch_min_hz), np.log(spec.pitch_max_hz))))
    events: list[PhoneEvent] = []
    t_cursor = 0.0
    for name, dur in phones:
        if events and rng.random() < spec.note_change_prob:
            note = float(np.exp(rng.uniform(np.log(spec.pitch_min_hz),
                                            np.log(spec.pitch_max_hz))))
        voiced = PHONEME_TEMPLATES[name][0]
        events.append(PhoneEvent(ph=name, start=t_cursor, end=t_cursor + dur,
                                 note_hz=note, voiced=voiced))
        t_cursor += dur

    n_total = int(round(t_cursor * sr))
    t_axis = np.arange(n_total) / sr
    f0 = np.zeros(n_total)
    for ev in events:
        lo, hi = int(round(ev.start * sr)), int(round(ev.end * sr))
        f0[lo:hi] = ev.note_hz
    f0 = f0 * (1.0 + spec.vibrato_depth
               * np.sin(2 * np.pi * spec.vibrato_rate_hz * t_axis + vibrato_phase))
    phase = 2 * np.pi * np.cumsum(f0) / sr

    wave = np.zeros(n_total)
    ramp_n = max(1, int(0.012 * sr))
    for ev in events:
        lo, hi = int(round(ev.start * sr)), int(round(ev.end * sr))
        n = hi - lo
        if n <= 0:
            continue
        env = np.ones(n)
        env[:ramp_n] = np.linspace(0, 1, min(ramp_n, n))
        env[-ramp_n:] *= np.linspace(1, 0, min(ramp_n, n))
        if ev.voiced:
            n_harm = max(1, min(24, int(0.45 * sr / ev.note_hz)))
            harmonics = np.arange(1, n_harm + 1)
            amps = harmonics ** -2.0 * _template_envelope(harmonics * ev.note_hz, ev.ph)
            seg = np.zeros(n)
            for k, a in zip(harmonics, amps):
                seg += a * np.sin(k * phase[lo:hi])
            seg *= 0.22 / max(1.0, np.abs(seg).max())
        else:
            noise = rng.standard_normal(n)
            spectrum = np.fft.rfft(noise)
            freqs = np.fft.rfftfreq(n, 1.0 / sr)
            shaped = np.fft.irfft(spectrum * (_template_envelope(freqs, ev.ph) - 1.0 + 0.02),
                                  n=n)
            seg = shaped * (0.08 / max(np.sqrt((shaped ** 2).mean()), 1e-9))
        wave[lo:hi] += seg * env

    peak = np.abs(wave).max()
    if peak > 0.89:
        wave *= 0.89 / peak
    return Clip(clip_id=clip_id, waveform=wave, text=" ".join(words),
                phones=events, vibrato_phase=vibrato_phase)


def generate_clips(spec: CorpusSpec, cfg: AudioConfig) -> list[Clip]:
    rng = np.random.default_rng(spec.seed)
    return [_render_clip(spec, cfg, rng, f"clip_{i:04d}") for i in range(spec.n_clips)]


def gen_corpus(spec: CorpusSpec, cfg: AudioConfig, out_dir) -> dict:
    """Write wavs, manifest, and lexicon; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = generate_clips(spec, cfg)
    manifest = {
        "fingerprint": cfg.fingerprint(),
        "sample_rate": cfg.sample_rate,
        "spec": asdict(spec),
        "lexicon": "lexicon.txt",
        "clips": [],
    }
    for clip in clips:
        wav_name = f"{clip.clip_id}.wav"
        write_wav(out / wav_name, clip.waveform, cfg.sample_rate)
        manifest["clips"].append({
            "id": clip.clip_id,
            "wav": wav_name,
            "text": clip.text,
            "duration": clip.duration,
            "vibrato_phase": clip.vibrato_phase,
            "phones": [asdict(ev) for ev in clip.phones],
        })
    write_mini_lexicon(out / "lexicon.txt")
    with open(out / "corpus.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_corpus(corpus_dir) -> tuple[dict, list[Clip]]:
    """Read the manifest and clip waveforms back from disk."""
    root = Path(corpus_dir)
    manifest_path = root / "corpus.json"
    if not manifest_path.exists():
        raise InputError(f"no corpus.json under {corpus_dir}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    clips = []
    for entry in manifest["clips"]:
        wave, sr = read_wav(root / entry["wav"])
        if sr != manifest["sample_rate"]:
            raise InputError(f"{entry['wav']}: sample rate {sr} != manifest {manifest['sample_rate']}")
        clips.append(Clip(
            clip_id=entry["id"], waveform=wave, text=entry["text"],
            phones=[PhoneEvent(**p) for p in entry["phones"]],
            vibrato_phase=entry["vibrato_phase"],
        ))
    return manifest, clips
