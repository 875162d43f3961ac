"""End-to-end plumbing: corpus preparation, code extraction, synthesis."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .audio import AudioConfig, MelSpectrogram, griffin_lim, stft_mel, write_mel, write_wav
from .ckpt import check_compatible, load_lm, load_vqvae, read_codes, write_codes
from .config import dataclass_from_flat
from .errors import ConfigError, InputError
from .lexicon import load_lexicon, to_phonemes
from .lm import CodeTriple, SamplerConfig, generate, windowed_generate
from .corpus import load_corpus
from .nn import Tensor


def corpus_clip_data(corpus_dir, audio_cfg: AudioConfig,
                     alphabet: list[str] | None = None) -> list[dict]:
    """Load clips, compute mels, and map phones to ids and frame midpoints."""
    manifest, clips = load_corpus(corpus_dir)
    if manifest["fingerprint"] != audio_cfg.fingerprint():
        raise ConfigError(
            f"corpus fingerprint {manifest['fingerprint']!r} does not match "
            f"audio config {audio_cfg.fingerprint()!r}"
        )
    lex = load_lexicon(Path(corpus_dir) / manifest.get("lexicon", "lexicon.txt"))
    if alphabet and lex.alphabet != alphabet:
        raise ConfigError(
            f"lexicon alphabet {lex.alphabet} does not match checkpoint alphabet {alphabet}"
        )
    frame_rate = audio_cfg.sample_rate / audio_cfg.hop
    data = []
    for clip in clips:
        mel = stft_mel(clip.waveform, audio_cfg)
        events = [
            (lex.ids[ev.ph], 0.5 * (ev.start + ev.end) * frame_rate)
            for ev in clip.phones
        ]
        data.append({
            "clip_id": clip.clip_id,
            "text": clip.text,
            "mel": mel.frames,
            "phoneme_ids": [pid for pid, _ in events],
            "phone_mid_frames": events,
        })
    return data, lex


def extract_codes(corpus_dir, vq_ckpt, out_dir) -> dict:
    """Freeze the codec and dump per-clip code files plus paired phonemes."""
    model, audio_cfg, alphabet = load_vqvae(vq_ckpt)
    data, lex = corpus_clip_data(corpus_dir, audio_cfg, alphabet or None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "fingerprint": audio_cfg.fingerprint(),
        "codebook_size": model.cfg.codebook_size,
        "alphabet": alphabet or lex.alphabet,
        "clips": [],
    }
    with nn.no_grad():
        for d in data:
            codes = model.encode_codes(Tensor(d["mel"][None]))
            triple = CodeTriple(top=codes["top"][0], middle=codes["middle"][0],
                                bottom=codes["bottom"][0])
            cod_name = f"{d['clip_id']}.cod"
            write_codes(out / cod_name, triple)
            manifest["clips"].append({
                "id": d["clip_id"],
                "cod": cod_name,
                "text": d["text"],
                "phoneme_ids": d["phoneme_ids"],
            })
    with open(out / "codes.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_code_dataset(codes_dir) -> dict:
    root = Path(codes_dir)
    path = root / "codes.json"
    if not path.exists():
        raise InputError(f"no codes.json under {codes_dir}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    items = []
    for entry in manifest["clips"]:
        items.append({
            "clip_id": entry["id"],
            "codes": read_codes(root / entry["cod"]),
            "phoneme_ids": entry["phoneme_ids"],
            "text": entry["text"],
        })
    manifest["items"] = items
    return manifest


def synthesize(text: str, lexicon_path, vq_ckpt, lm_ckpt, sampler: SamplerConfig,
               out_wav, gl_iters: int = 60, window: int | None = None,
               hop: int | None = None) -> dict:
    """Lyric text to WAV; also writes the mel and code files next to it.

    Sections separated by '|' go through windowed sampling when window/hop
    are given; otherwise the full text is one section.
    """
    vq_model, audio_cfg, alphabet = load_vqvae(vq_ckpt)
    lm_model, lm_alphabet, lm_fp = load_lm(lm_ckpt)
    check_compatible(vq_model, lm_model, audio_cfg.fingerprint(), lm_fp)
    lex = load_lexicon(lexicon_path)
    if alphabet and lex.alphabet != alphabet:
        raise ConfigError("lexicon alphabet does not match the codec checkpoint")

    sections = [s for s in (part.strip() for part in text.split("|")) if s]
    if not sections:
        raise InputError("empty lyric")
    phoneme_sections = [to_phonemes(s, lex) for s in sections]
    if window is not None or hop is not None:
        if window is None or hop is None:
            raise ConfigError("windowed sampling needs both window and hop")
        result = windowed_generate(phoneme_sections, lm_model, sampler, window, hop)
    elif len(phoneme_sections) == 1:
        result = generate(phoneme_sections[0], lm_model, sampler)
    else:
        result = windowed_generate(phoneme_sections, lm_model, sampler,
                                   window=lm_model.cfg.max_top_len,
                                   hop=lm_model.cfg.max_top_len)

    triple = result.codes
    with nn.no_grad():
        h_bot = vq_model.codes_to_latents(triple.bottom[None], "bottom")
        h_mid = vq_model.codes_to_latents(triple.middle[None], "middle")
        h_top = vq_model.codes_to_latents(triple.top[None], "top")
        mel_hat = vq_model.decode(h_bot, h_mid, h_top).data[0]
    mel_hat = np.maximum(mel_hat, np.log(audio_cfg.log_floor))
    mel = MelSpectrogram(frames=mel_hat.astype(np.float64),
                         fingerprint=audio_cfg.fingerprint())
    wave = griffin_lim(mel, audio_cfg, n_iters=gl_iters)

    out_wav = Path(out_wav)
    out_wav.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out_wav, wave, audio_cfg.sample_rate)
    write_mel(out_wav.with_suffix(".mel"), mel)
    write_codes(out_wav.with_suffix(".cod"), triple)
    return {
        "wav": str(out_wav),
        "mel": str(out_wav.with_suffix(".mel")),
        "codes": str(out_wav.with_suffix(".cod")),
        "top_len": int(triple.top.size),
        "duration_seconds": wave.size / audio_cfg.sample_rate,
        "truncated": result.truncated,
    }
