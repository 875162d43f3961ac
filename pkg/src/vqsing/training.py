"""Training loops for both stages.

Stage one fits the codec on random fixed-length mel crops with the phoneme
labels whose midpoints fall inside the crop as CTC targets. Stage two
teacher-forces the top decoder (with a stop target) and the interleaved
mixed decoder on whole clips. Both stages are single-threaded, seeded, and
abort with a DivergenceError on a non-finite loss, keeping the last saved
checkpoint.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import nn
from .audio import AudioConfig
from .ckpt import save_lm, save_vqvae
from .config import TrainConfig
from .errors import DivergenceError
from .evaluation import evaluate_lm, evaluate_vqvae
from .lm import LmConfig, LmModel, interleave
from .nn import Adam, Tensor
from .pipeline import corpus_clip_data, load_code_dataset
from .vqvae import VqvaeConfig, VqvaeModel, ctc_feasible


class _dtype_mode:
    def __init__(self, use_float64: bool):
        self.dtype = np.float64 if use_float64 else np.float32

    def __enter__(self):
        self.prev = nn.default_dtype()
        nn.set_default_dtype(self.dtype)

    def __exit__(self, *exc):
        nn.set_default_dtype(self.prev)


def _write_curves(path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _save_report(path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=1, sort_keys=True)


def _crop(rng: np.random.Generator, clip: dict, frames: int):
    """Pick an aligned window and the phoneme labels whose midpoints fall in it."""
    mel = clip["mel"]
    t = mel.shape[0]
    if t <= frames:
        start, width = 0, t
    else:
        start = int(rng.integers(0, (t - frames) // 4 + 1)) * 4
        width = frames
    labels = [pid for pid, mid in clip["phone_mid_frames"] if start <= mid < start + width]
    return mel[start:start + width], labels, width


def train_vqvae(corpus_dir, out_dir, cfg: TrainConfig, audio_cfg: AudioConfig,
                vq_cfg: VqvaeConfig) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _dtype_mode(cfg.float64):
        data, lex = corpus_clip_data(corpus_dir, audio_cfg)
        vq_cfg.ctc_vocab = lex.ctc_vocab
        vq_cfg.commit_weight = cfg.commit_weight
        vq_cfg.ctc_weight = cfg.ctc_weight
        rng = np.random.default_rng(cfg.seed)
        model = VqvaeModel(vq_cfg, rng)
        opt = Adam(list(model.named_parameters()), lr=cfg.lr)
        crop_frames = min(cfg.crop_frames, min(d["mel"].shape[0] for d in data))
        crop_frames -= crop_frames % 4
        top_frames = crop_frames // 4

        mels = [d["mel"] for d in data]
        full_targets = [d["phoneme_ids"] for d in data]
        stats0 = evaluate_vqvae(model, mels, full_targets)
        curves: list[tuple] = []
        ckpt_path = out / "vqvae_final.kvq"
        started = time.time()
        ctc_skipped = 0

        for it in range(1, cfg.iterations + 1):
            batch_mel, batch_targets = [], []
            for _ in range(cfg.batch_size):
                clip = data[int(rng.integers(0, len(data)))]
                mel_crop, labels, width = _crop(rng, clip, crop_frames)
                for _retry in range(4):
                    if ctc_feasible(width // 4, labels) and labels:
                        break
                    mel_crop, labels, width = _crop(rng, clip, crop_frames)
                if not (labels and ctc_feasible(width // 4, labels)):
                    labels = []  # drop the CTC term for this sample
                    ctc_skipped += 1
                batch_mel.append(mel_crop)
                batch_targets.append(labels)
            mel = Tensor(np.stack(batch_mel))
            total, report, aux = model.training_losses(mel, batch_targets, quantizer="ste")
            if not np.isfinite(report.total):
                save_vqvae(out / "vqvae_diverged.kvq", model, audio_cfg, lex.alphabet)
                raise DivergenceError(f"non-finite codec loss at iteration {it}")
            opt.zero_grad()
            total.backward()
            opt.step()
            model.ema_step(aux)
            curves.append((it, report.total, report.mse, report.commit_top,
                           report.commit_mid, report.commit_bot, report.ctc))
            if cfg.ckpt_every and it % cfg.ckpt_every == 0:
                save_vqvae(ckpt_path, model, audio_cfg, lex.alphabet)

        stats = evaluate_vqvae(model, mels, full_targets)
        save_vqvae(ckpt_path, model, audio_cfg, lex.alphabet)
        _write_curves(out / "vqvae_curves.csv",
                      ["iteration", "total", "mse", "commit_top", "commit_mid",
                       "commit_bot", "ctc"], curves)
        metrics = {
            "recon_mse_iter0": stats0["recon_mse"],
            "recon_mse_final": stats["recon_mse"],
            "recon_ratio": stats["recon_mse"] / max(stats0["recon_mse"], 1e-12),
            "perplexity_top": stats["perplexity_top"],
            "perplexity_middle": stats["perplexity_middle"],
            "perplexity_bottom": stats["perplexity_bottom"],
            "ctc_per": stats["ctc_per"],
            "iterations": cfg.iterations,
            "crop_frames": crop_frames,
            "top_frames": top_frames,
            "ctc_skipped": ctc_skipped,
            "final_total": curves[-1][1] if curves else float("nan"),
            "train_seconds": time.time() - started,
            "checkpoint": str(ckpt_path),
        }
        _save_report(out / "vqvae_report.json", metrics)
        return metrics


def train_lm(codes_dir, out_dir, cfg: TrainConfig, lm_cfg: LmConfig) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _dtype_mode(cfg.float64):
        manifest = load_code_dataset(codes_dir)
        items = manifest["items"]
        alphabet = manifest["alphabet"]
        lm_cfg.n_phonemes = len(alphabet)
        lm_cfg.codebook_size = int(manifest["codebook_size"])
        rng = np.random.default_rng(cfg.seed)
        model = LmModel(lm_cfg, rng)
        opt = Adam(list(model.named_parameters()), lr=cfg.lr)
        stop = lm_cfg.stop_id

        curves: list[tuple] = []
        ckpt_path = out / "lm_final.klm"
        started = time.time()
        for it in range(1, cfg.iterations + 1):
            item = items[int(rng.integers(0, len(items)))]
            triple = item["codes"]
            memory = model.encode_lyrics(item["phoneme_ids"])
            logits, _ = model.top.teacher_forced(list(triple.top), memory, dropout_rng=rng)
            targets = np.concatenate([triple.top, [stop]])
            top_loss = nn.cross_entropy(logits, targets, reduction="mean")

            mix = interleave(triple.middle, triple.bottom)
            cond = model.upsampler(triple.top)
            mid_logits, bot_logits, mid_pos, bot_pos = model.mixed.teacher_forced(mix, cond)
            n_mixed = len(mix)
            mixed_loss = (nn.cross_entropy(mid_logits, mix.tokens[mid_pos], reduction="sum")
                          + nn.cross_entropy(bot_logits, mix.tokens[bot_pos], reduction="sum")
                          ) * (1.0 / n_mixed)
            total = top_loss + mixed_loss
            if not np.isfinite(float(total.data)):
                save_lm(out / "lm_diverged.klm", model, alphabet, manifest["fingerprint"])
                raise DivergenceError(f"non-finite language-model loss at iteration {it}")
            opt.zero_grad()
            total.backward()
            opt.step()
            curves.append((it, float(total.data), float(top_loss.data),
                           float(mixed_loss.data)))
            if cfg.ckpt_every and it % cfg.ckpt_every == 0:
                save_lm(ckpt_path, model, alphabet, manifest["fingerprint"])

        stats = evaluate_lm(model, items)
        save_lm(ckpt_path, model, alphabet, manifest["fingerprint"])
        _write_curves(out / "lm_curves.csv",
                      ["iteration", "total", "top_ce", "mixed_ce"], curves)
        metrics = {
            **stats,
            "iterations": cfg.iterations,
            "final_total": curves[-1][1] if curves else float("nan"),
            "train_seconds": time.time() - started,
            "checkpoint": str(ckpt_path),
        }
        _save_report(out / "lm_report.json", metrics)
        return metrics
