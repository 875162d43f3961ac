"""Self-verification harness: per-layer gradient checks, a full-objective
check on a briefly trained tiny codec, and a CTC brute-force selftest.

All checks run in float64. The CTC oracle enumerates every frame-level
path directly and never touches the forward algorithm.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import nn
from .lm import (
    LmConfig,
    LmModel,
    SamplerConfig,
    interleave,
    linear_attention_quadratic,
)
from .nn import Adam, Parameter, Tensor, grad_check
from .vqvae import VqvaeConfig, VqvaeModel, ctc_log_likelihood


class _f64:
    def __enter__(self):
        self.prev = nn.default_dtype()
        nn.set_default_dtype(np.float64)

    def __exit__(self, *exc):
        nn.set_default_dtype(self.prev)


# ---------------------------------------------------------------------------
# CTC brute force
# ---------------------------------------------------------------------------


def collapse_path(path) -> list[int]:
    out, prev = [], -1
    for s in path:
        if s != prev and s != 0:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force(log_probs: np.ndarray, targets: list[int]) -> float:
    """-ln p(targets) by summing every frame path that collapses to them."""
    t_len, vocab = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse_path(path) == list(targets):
            total = np.logaddexp(total, sum(log_probs[t, path[t]] for t in range(t_len)))
    return -total


def ctc_selftest(n_cases: int = 200, seed: int = 0, tol: float = 1e-10,
                 max_paths: int = 4096) -> dict:
    """Random small instances with (P+1)^T <= max_paths; returns worst gap."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    ran = 0
    with _f64():
        while ran < n_cases:
            t_len = int(rng.integers(1, 7))
            n_ph = int(rng.integers(1, 4))
            vocab = n_ph + 1
            if vocab ** t_len > max_paths:
                continue
            n_y = int(rng.integers(1, min(3, t_len) + 1))
            y = [int(v) for v in rng.integers(1, vocab, size=n_y)]
            logits = rng.standard_normal((t_len, vocab))
            lp = logits - logits.max(axis=1, keepdims=True)
            lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
            want = ctc_brute_force(lp, y)
            try:
                got = float(ctc_log_likelihood(Tensor(logits), y).data)
            except Exception:
                if np.isfinite(want):
                    raise
                ran += 1
                continue
            worst = max(worst, abs(got - want))
            ran += 1
    return {"cases": ran, "max_abs_err": worst, "tol": tol, "passed": worst < tol}


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _params_of(module, extra=()):
    return list(extra) + list(module.named_parameters())


def _layer_check_specs(rng_seed: int = 0):
    """Yield (name, builder); builder returns (loss_fn, params)."""

    def conv_check():
        rng = np.random.default_rng(rng_seed)
        x = Parameter(rng.standard_normal((2, 4, 12)))
        w = Parameter(rng.standard_normal((6, 2, 3)) * 0.4)
        b = Parameter(rng.standard_normal(6) * 0.1)
        tgt = rng.standard_normal((2, 6, 6))

        def loss():
            y = nn.conv1d(x, w, b, stride=2, dilation=2, groups=2)
            d = y - Tensor(tgt)
            return (d * d).mean()

        return loss, [("x", x), ("w", w), ("b", b)]

    def gru_check():
        rng = np.random.default_rng(rng_seed + 1)
        gru = nn.GRU(3, 5, rng)
        x = Parameter(rng.standard_normal((2, 6, 3)))

        def loss():
            y = gru.seq(x)
            return (y * y).mean()

        return loss, _params_of(gru, [("x", x)])

    def bigru_check():
        rng = np.random.default_rng(rng_seed + 2)
        gru = nn.BiGRU(3, 4, rng)
        x = Parameter(rng.standard_normal((1, 5, 3)))

        def loss():
            y = gru(x)
            return (y * y).mean()

        return loss, _params_of(gru, [("x", x)])

    def group_norm_check():
        rng = np.random.default_rng(rng_seed + 3)
        norm = nn.GroupNorm(6, 3)
        x = Parameter(rng.standard_normal((2, 6, 5)))
        tgt = rng.standard_normal((2, 6, 5))

        def loss():
            d = norm(x) - Tensor(tgt)
            return (d * d).mean()

        return loss, _params_of(norm, [("x", x)])

    def layer_norm_check():
        rng = np.random.default_rng(rng_seed + 4)
        norm = nn.LayerNorm(7)
        x = Parameter(rng.standard_normal((4, 7)))
        tgt = rng.standard_normal((4, 7))

        def loss():
            d = norm(x) - Tensor(tgt)
            return (d * d).mean()

        return loss, _params_of(norm, [("x", x)])

    def xent_check():
        rng = np.random.default_rng(rng_seed + 5)
        logits = Parameter(rng.standard_normal(9))

        def loss():
            return nn.softmax_xent(logits, 3)

        return loss, [("logits", logits)]

    def ctc_check():
        rng = np.random.default_rng(rng_seed + 6)
        logits = Parameter(rng.standard_normal((6, 4)))

        def loss():
            return ctc_log_likelihood(logits, [1, 2, 2])

        return loss, [("logits", logits)]

    def attention_check():
        rng = np.random.default_rng(rng_seed + 7)
        cfg = LmConfig(n_phonemes=4, codebook_size=8, enc_embed=6, enc_channels=8,
                       enc_hidden=4, attn_dim=8, attn_filters=4, attn_kernel=5,
                       prenet_dim=6, dec_embed=6, dec_hidden=8, mixed_dim=8,
                       mixed_ffn=12, ups_embed=6, ups_channels=8, max_top_len=8)
        lm = LmModel(cfg, rng)
        ph = [1, 2, 3, 4, 2]
        with nn.no_grad():
            memory0 = lm.encode_lyrics(ph)
            base, _ = lm.top.teacher_forced([3, 1, 5], memory0)
        tgt = base.data + 0.1 * rng.standard_normal(base.shape)

        def loss():
            memory = lm.encode_lyrics(ph)
            logits, weights = lm.top.teacher_forced([3, 1, 5], memory)
            d = logits - Tensor(tgt)
            return (d * d).mean() + 0.1 * (weights * weights).mean()

        return loss, (list(("enc." + n, p) for n, p in lm.encoder.named_parameters())
                      + list(("top." + n, p) for n, p in lm.top.named_parameters()))

    def linear_attention_check():
        rng = np.random.default_rng(rng_seed + 8)
        q = Parameter(rng.standard_normal((5, 4)))
        k = Parameter(rng.standard_normal((5, 4)))
        v = Parameter(rng.standard_normal((5, 4)))
        # target near the initial output keeps the loss small, so the
        # finite-difference cancellation noise stays below tolerance
        with nn.no_grad():
            base = linear_attention_quadratic(q, k, v).data
        tgt = base + 0.3 * rng.standard_normal(base.shape)

        def loss():
            d = linear_attention_quadratic(q, k, v) - Tensor(tgt)
            return (d * d).mean()

        return loss, [("q", q), ("k", k), ("v", v)]

    def mixed_decoder_check():
        rng = np.random.default_rng(rng_seed + 9)
        cfg = LmConfig(n_phonemes=4, codebook_size=8, enc_embed=6, enc_channels=8,
                       enc_hidden=4, attn_dim=8, attn_filters=4, attn_kernel=5,
                       prenet_dim=6, dec_embed=6, dec_hidden=8, mixed_dim=8,
                       mixed_layers=1, mixed_ffn=12, ups_embed=6, ups_channels=8,
                       ups_dilations=(1, 2), max_top_len=8)
        lm = LmModel(cfg, rng)
        top = [1, 5, 2]
        mix = interleave(rng.integers(0, 8, 6), rng.integers(0, 8, 12))

        def loss():
            cond = lm.upsampler(top)
            mid_logits, bot_logits, mid_pos, bot_pos = lm.mixed.teacher_forced(mix, cond)
            return (nn.cross_entropy(mid_logits, mix.tokens[mid_pos], reduction="sum")
                    + nn.cross_entropy(bot_logits, mix.tokens[bot_pos], reduction="sum")
                    ) * (1.0 / len(mix))

        return loss, list(lm.upsampler.named_parameters()) + list(lm.mixed.named_parameters())

    def codec_blocks_check():
        rng = np.random.default_rng(rng_seed + 10)
        cfg = VqvaeConfig(n_mels=6, channels=8, latent_dim=6, codebook_size=8,
                          conv_groups=2, norm_groups=2, g3_blocks=1, ctc_vocab=4)
        model = VqvaeModel(cfg, rng)
        mel = Tensor(rng.standard_normal((1, 8, 6)) - 6.0)
        with nn.no_grad():
            base = model.decode(*model.encode(mel)).data
        tgt = base + 0.1 * rng.standard_normal(base.shape)
        params = (list(("enc." + n, p) for n, p in model.encoder.named_parameters())
                  + list(("dec." + n, p) for n, p in model.decoder.named_parameters()))

        def loss():
            h_bot, h_mid, h_top = model.encode(mel)
            out = model.decode(h_bot, h_mid, h_top)
            d = out - Tensor(tgt)
            return (d * d).mean()

        # a short fit moves the normalization statistics away from the
        # ill-conditioned random-init point, where the step size 1e-5 would
        # pick up third-order curvature rather than gradient error
        opt = Adam(params, lr=3e-3)
        for _ in range(150):
            opt.zero_grad()
            loss().backward()
            opt.step()

        return loss, params

    return [
        ("conv1d(stride,dilation,groups)", conv_check),
        ("gru_seq", gru_check),
        ("bigru", bigru_check),
        ("group_norm", group_norm_check),
        ("layer_norm", layer_norm_check),
        ("softmax_xent", xent_check),
        ("ctc_log_likelihood", ctc_check),
        ("lyrics_encoder+location_attention+top_decoder", attention_check),
        ("linear_attention_quadratic", linear_attention_check),
        ("upsampler+mixed_decoder", mixed_decoder_check),
        ("codec_encoder+decoder", codec_blocks_check),
    ]


def full_objective_check(train_iters: int = 400, seed: int = 2) -> float:
    """Gradient-check the complete codec objective on a tiny model.

    The model is trained briefly first so the loss surface sits at a
    realistic small value, and the quantizer runs in identity mode at the
    frozen assignment, which removes the argmin discontinuity exactly as
    the straight-through contract prescribes.
    """
    with _f64():
        rng = np.random.default_rng(seed)
        cfg = VqvaeConfig(n_mels=8, channels=8, latent_dim=8, codebook_size=8,
                          conv_groups=2, norm_groups=2, g3_blocks=1, ctc_vocab=4)
        model = VqvaeModel(cfg, rng)
        mel = Tensor(rng.standard_normal((1, 16, 8)) * 0.5 - 6.0)
        targets = [[1, 2, 3]]
        opt = Adam(list(model.named_parameters()), lr=3e-3)
        for _ in range(train_iters):
            opt.zero_grad()
            total, _, aux = model.training_losses(mel, targets, quantizer="ste")
            total.backward()
            opt.step()
            model.ema_step(aux)
        _, _, aux = model.training_losses(mel, targets, quantizer="identity")
        frozen = aux["codes"]

        def loss():
            total, _, _ = model.training_losses(mel, targets, quantizer="identity",
                                                frozen_codes=frozen)
            return total

        return grad_check(loss, list(model.named_parameters()))


def run_gradient_checks(include_full: bool = True) -> list[tuple[str, float]]:
    results = []
    with _f64():
        for name, builder in _layer_check_specs():
            loss, params = builder()
            results.append((name, grad_check(loss, params)))
    if include_full:
        results.append(("full_codec_objective", full_objective_check()))
    return results
