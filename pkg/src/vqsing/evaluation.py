"""Objective metrics: reconstruction error, code usage, phoneme error rate,
teacher-forced accuracies, attention monotonicity."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .lm import MID, LmModel, interleave
from .nn import Tensor
from .vqvae import VqvaeModel, ctc_greedy_decode


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def usage_perplexity(counts: np.ndarray) -> float:
    """exp(entropy) of the empirical code distribution; 1 when collapsed."""
    total = counts.sum()
    if total == 0:
        return 1.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


@dataclass
class EvalReport:
    recon_mse: float
    perplexity_top: float
    perplexity_middle: float
    perplexity_bottom: float
    ctc_per: float
    top_accuracy: float
    middle_accuracy: float
    bottom_accuracy: float
    attention_violation_rate: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_vqvae(model: VqvaeModel, mels: list[np.ndarray],
                   targets: list[list[int]]) -> dict:
    """Full-clip reconstruction MSE, per-level usage perplexity, greedy-CTC PER."""
    m = model.cfg.codebook_size
    counts = {level: np.zeros(m) for level in ("top", "middle", "bottom")}
    sq_err, n_cells = 0.0, 0
    per_edits, per_len = 0, 0
    with nn.no_grad():
        for mel_np, phones in zip(mels, targets):
            mel = Tensor(mel_np[None])
            h_bot, h_mid, h_top = model.encode(mel)
            latents = {"bottom": h_bot, "middle": h_mid, "top": h_top}
            quantized = {}
            for level, h in latents.items():
                cds = model.codebooks[level].lookup_codes(h.data)
                counts[level] += np.bincount(cds.reshape(-1), minlength=m)
                quantized[level] = Tensor(model.codebooks[level].prototypes[cds])
            mel_hat = model.decode(quantized["bottom"], quantized["middle"], quantized["top"])
            sq_err += float(((mel_hat.data - mel.data) ** 2).sum())
            n_cells += mel.data.size
            src = quantized["top"] if model.cfg.ctc_on == "post" else latents["top"]
            logits = model.ctc_logits(src)
            decoded = ctc_greedy_decode(logits.data[0])
            per_edits += edit_distance(decoded, phones)
            per_len += len(phones)
    return {
        "recon_mse": sq_err / n_cells,
        "perplexity_top": usage_perplexity(counts["top"]),
        "perplexity_middle": usage_perplexity(counts["middle"]),
        "perplexity_bottom": usage_perplexity(counts["bottom"]),
        "ctc_per": per_edits / max(per_len, 1),
    }


def evaluate_lm(lm: LmModel, items: list[dict]) -> dict:
    """Teacher-forced accuracies and attention monotonicity on (codes, phonemes) items."""
    stop = lm.cfg.stop_id
    top_hit = top_n = mid_hit = mid_n = bot_hit = bot_n = 0
    violations = transitions = 0
    with nn.no_grad():
        for item in items:
            triple, phoneme_ids = item["codes"], item["phoneme_ids"]
            memory = lm.encode_lyrics(phoneme_ids)
            logits, weights = lm.top.teacher_forced(list(triple.top), memory)
            targets = np.concatenate([triple.top, [stop]])
            pred = logits.data.argmax(axis=1)
            top_hit += int((pred == targets).sum())
            top_n += targets.size
            expect = weights.data @ np.arange(weights.shape[1])
            violations += int((expect[1:] < expect[:-1]).sum())
            transitions += expect.size - 1

            mix = interleave(triple.middle, triple.bottom)
            cond = lm.upsampler(triple.top)
            mid_logits, bot_logits, mid_pos, bot_pos = lm.mixed.teacher_forced(mix, cond)
            mid_t = mix.tokens[mid_pos]
            bot_t = mix.tokens[bot_pos]
            mid_hit += int((mid_logits.data.argmax(axis=1) == mid_t).sum())
            bot_hit += int((bot_logits.data.argmax(axis=1) == bot_t).sum())
            mid_n += mid_t.size
            bot_n += bot_t.size
    mixed_acc = (mid_hit + bot_hit) / max(mid_n + bot_n, 1)
    return {
        "top_accuracy": top_hit / max(top_n, 1),
        "middle_accuracy": mid_hit / max(mid_n, 1),
        "bottom_accuracy": bot_hit / max(bot_n, 1),
        "mixed_accuracy": mixed_acc,
        "attention_violation_rate": violations / max(transitions, 1),
    }


def evaluate(vq_ckpt, lm_ckpt, corpus_dir) -> EvalReport:
    """Load both checkpoints and score every clip of the corpus."""
    from .ckpt import load_lm, load_vqvae
    from .pipeline import corpus_clip_data

    vq_model, audio_cfg, alphabet = load_vqvae(vq_ckpt)
    lm_model, lm_alphabet, _ = load_lm(lm_ckpt)
    data, _ = corpus_clip_data(corpus_dir, audio_cfg, alphabet)
    vq_stats = evaluate_vqvae(vq_model, [d["mel"] for d in data],
                              [d["phoneme_ids"] for d in data])
    items = []
    with nn.no_grad():
        for d in data:
            codes = vq_model.encode_codes(Tensor(d["mel"][None]))
            from .lm import CodeTriple
            items.append({
                "codes": CodeTriple(top=codes["top"][0], middle=codes["middle"][0],
                                    bottom=codes["bottom"][0]),
                "phoneme_ids": d["phoneme_ids"],
            })
    lm_stats = evaluate_lm(lm_model, items)
    return EvalReport(
        recon_mse=vq_stats["recon_mse"],
        perplexity_top=vq_stats["perplexity_top"],
        perplexity_middle=vq_stats["perplexity_middle"],
        perplexity_bottom=vq_stats["perplexity_bottom"],
        ctc_per=vq_stats["ctc_per"],
        top_accuracy=lm_stats["top_accuracy"],
        middle_accuracy=lm_stats["middle_accuracy"],
        bottom_accuracy=lm_stats["bottom_accuracy"],
        attention_violation_rate=lm_stats["attention_violation_rate"],
    )
