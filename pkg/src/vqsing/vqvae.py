"""Three-level vector-quantized autoencoder over log-mel frames.

Encoder: a stem convolution and five residual blocks; blocks 4 and 5
stride by 2, so the three heads emit latents at full, half, and quarter
resolution. Decoder: per level, recurrent-convolutional blocks at native
resolution, nearest-neighbor upsampling back to full resolution, and a
projection to mel bins; the three projections are summed.

Codebooks are trained with exponential-moving-average updates, not
gradients; the quantizer is a straight-through node. A CTC head on the
top-level latents ties codes to phoneme content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InfeasibleAlignmentError, InputError
from .nn import Module, Parameter, Tensor
from .nn.tensor import _accum, _node

LEVELS = ("top", "middle", "bottom")


@dataclass
class VqvaeConfig:
    n_mels: int = 80
    channels: int = 64
    latent_dim: int = 32
    codebook_size: int = 256
    kernel: int = 3
    conv_groups: int = 4
    norm_groups: int = 4
    g3_blocks: int = 2
    ctc_vocab: int = 11  # phoneme count + 1 for the blank
    ctc_on: str = "pre"  # "pre": CTC reads continuous top latents; "post": quantized
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    commit_weight: float = 0.25
    ctc_weight: float = 0.10
    input_offset: float = -6.0
    input_scale: float = 0.25
    output_bias: float = -2.5

    def __post_init__(self):
        if self.channels % 2 != 0:
            raise ConfigError("channels must be even (bidirectional GRU halves)")
        if self.ctc_on not in ("pre", "post"):
            raise ConfigError(f"ctc_on must be 'pre' or 'post', got {self.ctc_on!r}")


# ---------------------------------------------------------------------------
# codebook
# ---------------------------------------------------------------------------


class Codebook:
    """M prototype vectors of dimension D plus EMA accumulators."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator,
                 decay: float = 0.99, epsilon: float = 1e-5):
        if size < 2:
            raise ConfigError(f"codebook size must be >= 2, got {size}")
        dt = nn.default_dtype()
        self.prototypes = rng.uniform(-0.05, 0.05, size=(size, dim)).astype(dt)
        self.ema_counts = np.zeros(size, dtype=dt)
        self.ema_sums = self.prototypes.copy()
        self.decay = decay
        self.epsilon = epsilon

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def lookup_codes(self, h: np.ndarray) -> np.ndarray:
        """Nearest prototype per row by squared distance; ties go to the lowest index."""
        if h.shape[-1] != self.dim:
            raise InputError(f"latent dim {h.shape[-1]} != codebook dim {self.dim}")
        flat = h.reshape(-1, self.dim)
        dists = ((flat[:, None, :] - self.prototypes[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(dists, axis=1).reshape(h.shape[:-1])

    def state(self) -> dict[str, np.ndarray]:
        return {"prototypes": self.prototypes.copy(),
                "ema_counts": self.ema_counts.copy(),
                "ema_sums": self.ema_sums.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        dt = nn.default_dtype()
        self.prototypes = np.asarray(state["prototypes"], dtype=dt).copy()
        self.ema_counts = np.asarray(state["ema_counts"], dtype=dt).copy()
        self.ema_sums = np.asarray(state["ema_sums"], dtype=dt).copy()


def quantize(h: Tensor, cb: Codebook) -> tuple[np.ndarray, Tensor, Tensor]:
    """Snap each latent vector to its nearest prototype.

    Returns (codes, h_q, commit): h_q carries prototype values forward and the
    identity gradient backward; commit is the mean squared distance between h
    and its (gradient-blocked) prototypes, averaged over timesteps.
    """
    codes = cb.lookup_codes(h.data)
    proto = cb.prototypes[codes]
    h_q = nn.straight_through(h, proto)
    diff = h - Tensor(proto)
    commit = (diff * diff).sum(axis=-1).mean()
    return codes, h_q, commit


def ema_update(cb: Codebook, h: np.ndarray, codes: np.ndarray) -> None:
    """Refresh prototypes from EMA statistics of the assigned latents in place."""
    flat = h.reshape(-1, cb.dim)
    ids = codes.reshape(-1)
    counts = np.bincount(ids, minlength=cb.size).astype(flat.dtype)
    sums = np.zeros_like(cb.ema_sums)
    np.add.at(sums, ids, flat)
    cb.ema_counts = cb.decay * cb.ema_counts + (1.0 - cb.decay) * counts
    cb.ema_sums = cb.decay * cb.ema_sums + (1.0 - cb.decay) * sums
    total = cb.ema_counts.sum()
    if total <= 0:
        return
    smoothed = (cb.ema_counts + cb.epsilon) / (total + cb.size * cb.epsilon) * total
    cb.prototypes = cb.ema_sums / smoothed[:, None]


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------


class ResBlock1D(Module):
    """Two convolutions plus a one-convolution residual path."""

    def __init__(self, channels: int, kernel: int, stride: int, rng):
        self.conv1 = nn.Conv1d(channels, channels, kernel, rng, stride=stride)
        self.conv2 = nn.Conv1d(channels, channels, kernel, rng)
        self.skip = nn.Conv1d(channels, channels, 1, rng, stride=stride)

    def __call__(self, x: Tensor) -> Tensor:
        return self.skip(x) + self.conv2(nn.elu(self.conv1(x)))


class Encoder(Module):
    def __init__(self, cfg: VqvaeConfig, rng):
        c = cfg.channels
        self.cfg = cfg
        self.stem = nn.Conv1d(cfg.n_mels, c, cfg.kernel, rng)
        strides = (1, 1, 1, 2, 2)
        self.blocks = [ResBlock1D(c, cfg.kernel, s, rng) for s in strides]
        self.head_bottom = nn.Conv1d(c, cfg.latent_dim, 1, rng)
        self.head_middle = nn.Conv1d(c, cfg.latent_dim, 1, rng)
        self.head_top = nn.Conv1d(c, cfg.latent_dim, 1, rng)

    def __call__(self, mel: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """mel (B, T, n_mels) with T % 4 == 0 -> latents (B, T, D), (B, T/2, D), (B, T/4, D)."""
        if mel.shape[-2] % 4 != 0:
            raise InputError(f"frame count {mel.shape[-2]} not divisible by 4; pad upstream")
        x = (mel - self.cfg.input_offset) * self.cfg.input_scale
        x = nn.transpose(x, (0, 2, 1))
        x = self.stem(x)
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in (2, 3, 4):
                taps.append(x)
        h_bot = nn.transpose(self.head_bottom(taps[0]), (0, 2, 1))
        h_mid = nn.transpose(self.head_middle(taps[1]), (0, 2, 1))
        h_top = nn.transpose(self.head_top(taps[2]), (0, 2, 1))
        return h_bot, h_mid, h_top


class G3Block(Module):
    """Bidirectional GRU, grouped dilated convolution, group norm, residual."""

    def __init__(self, channels: int, rng, groups: int, norm_groups: int,
                 kernel: int, dilation: int):
        self.gru = nn.BiGRU(channels, channels // 2, rng)
        self.conv = nn.Conv1d(channels, channels, kernel, rng,
                              dilation=dilation, groups=groups)
        self.norm = nn.GroupNorm(channels, norm_groups)

    def __call__(self, x: Tensor) -> Tensor:
        h = nn.transpose(x, (0, 2, 1))
        h = self.gru(h)
        h = nn.transpose(h, (0, 2, 1))
        return x + self.norm(self.conv(h))


class DecoderLevel(Module):
    def __init__(self, cfg: VqvaeConfig, upsample: int, rng):
        c = cfg.channels
        self.upsample = upsample
        self.inp = nn.Conv1d(cfg.latent_dim, c, 1, rng)
        self.blocks = [
            G3Block(c, rng, cfg.conv_groups, cfg.norm_groups, cfg.kernel, 3 ** i)
            for i in range(cfg.g3_blocks)
        ]
        self.up = nn.Conv1d(c, c, cfg.kernel, rng) if upsample > 1 else None
        self.proj = nn.Conv1d(c, cfg.n_mels, cfg.kernel, rng)
        self.proj.b.data[:] = cfg.output_bias

    def __call__(self, h: Tensor) -> Tensor:
        """h (B, L, D) -> projection (B, n_mels, L * upsample)."""
        x = nn.transpose(h, (0, 2, 1))
        x = self.inp(x)
        for block in self.blocks:
            x = block(x)
        if self.up is not None:
            x = nn.repeat(x, self.upsample, axis=2)
            x = self.up(x)
        return self.proj(x)


class Decoder(Module):
    def __init__(self, cfg: VqvaeConfig, rng):
        self.level_bottom = DecoderLevel(cfg, 1, rng)
        self.level_middle = DecoderLevel(cfg, 2, rng)
        self.level_top = DecoderLevel(cfg, 4, rng)

    def branches(self, h_bot: Tensor, h_mid: Tensor, h_top: Tensor) -> list[Tensor]:
        lb, lm, lt = h_bot.shape[1], h_mid.shape[1], h_top.shape[1]
        if not (lb == 2 * lm == 4 * lt):
            raise InputError(f"latent lengths must satisfy 1:2:4, got top={lt} mid={lm} bot={lb}")
        return [self.level_bottom(h_bot), self.level_middle(h_mid), self.level_top(h_top)]

    def __call__(self, h_bot: Tensor, h_mid: Tensor, h_top: Tensor) -> Tensor:
        """Quantized latents -> reconstructed mel (B, T, n_mels)."""
        b_bot, b_mid, b_top = self.branches(h_bot, h_mid, h_top)
        return nn.transpose(b_bot + b_mid + b_top, (0, 2, 1))


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def _extend_targets(targets: list[int]) -> np.ndarray:
    ext = np.zeros(2 * len(targets) + 1, dtype=np.intp)
    ext[1::2] = targets
    return ext


def ctc_feasible(n_frames: int, targets: list[int]) -> bool:
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return n_frames >= len(targets) + repeats


def ctc_log_likelihood(logits: Tensor, targets: list[int]) -> Tensor:
    """-ln p(targets | logits) under the alignment-free forward algorithm.

    logits: (T, V) with blank id 0; targets: ids in 1..V-1. Log-space forward
    over the blank-interleaved label sequence; the backward pass uses the
    standard alpha-beta occupancy gradient.
    """
    T, V = logits.shape
    targets = [int(t) for t in targets]
    if not targets:
        raise InputError("empty CTC target")
    if min(targets) < 1 or max(targets) >= V:
        raise InputError(f"CTC target ids must lie in [1, {V}), got {targets}")
    if not ctc_feasible(T, targets):
        raise InfeasibleAlignmentError(
            f"{len(targets)} labels (with repeats) cannot align to {T} frames"
        )
    ext = _extend_targets(targets)
    S = ext.size
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    neg_inf = -np.inf
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), neg_inf)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        cand = prev.copy()
        cand[1:] = np.logaddexp(cand[1:], prev[:-1])
        cand[can_skip] = np.logaddexp(cand[can_skip], prev[np.flatnonzero(can_skip) - 2])
        alpha[t] = cand + lp[t, ext]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else neg_inf)
    if not np.isfinite(log_p):
        raise InfeasibleAlignmentError("all alignment paths have zero probability")
    loss = np.asarray(-log_p, dtype=logits.dtype)

    def backward(g):
        beta = np.full((T, S), neg_inf)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        skip_from = np.zeros(S, dtype=bool)
        skip_from[:-2] = can_skip[2:]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, ext]
            cand = nxt.copy()
            cand[:-1] = np.logaddexp(cand[:-1], nxt[1:])
            idx = np.flatnonzero(skip_from)
            cand[idx] = np.logaddexp(cand[idx], nxt[idx + 2])
            beta[t] = cand
        gamma = alpha + beta
        occ = np.full((T, V), neg_inf)
        rows = np.repeat(np.arange(T), S)
        cols = np.tile(ext, T)
        np.logaddexp.at(occ, (rows, cols), gamma.reshape(-1))
        grad = np.exp(lp) - np.exp(occ - log_p)
        _accum(logits, float(g) * grad)

    return _node(loss, (logits,), backward)


def ctc_greedy_decode(logits: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.asarray(logits).argmax(axis=1)
    out: list[int] = []
    prev = -1
    for b in best:
        if b != prev and b != 0:
            out.append(int(b))
        prev = b
    return out


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------


@dataclass
class VqLossReport:
    mse: float
    commit_top: float
    commit_mid: float
    commit_bot: float
    ctc: float
    total: float
    commit_weight: float
    ctc_weight: float


def vqvae_loss(mel: Tensor, mel_hat: Tensor, commits: tuple[Tensor, Tensor, Tensor],
               ctc: Tensor | None, commit_weight: float, ctc_weight: float
               ) -> tuple[Tensor, VqLossReport]:
    """total = mse + commit_weight * (sum of commits) + ctc_weight * ctc."""
    if commit_weight < 0 or ctc_weight < 0:
        raise ConfigError("loss weights must be non-negative")
    if mel.shape != mel_hat.shape:
        raise InputError(f"mel shape {mel.shape} != reconstruction shape {mel_hat.shape}")
    diff = mel_hat - mel
    mse = (diff * diff).mean()
    commit_top, commit_mid, commit_bot = commits
    total = mse + commit_weight * (commit_top + commit_mid + commit_bot)
    ctc_val = 0.0
    if ctc is not None and ctc_weight > 0:
        total = total + ctc_weight * ctc
        ctc_val = float(ctc.data)
    report = VqLossReport(
        mse=float(mse.data), commit_top=float(commit_top.data),
        commit_mid=float(commit_mid.data), commit_bot=float(commit_bot.data),
        ctc=ctc_val, total=float(total.data),
        commit_weight=commit_weight, ctc_weight=ctc_weight,
    )
    return total, report


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class VqvaeModel(Module):
    def __init__(self, cfg: VqvaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.ctc_head = nn.Linear(cfg.latent_dim, cfg.ctc_vocab, rng)
        self.codebooks = {
            level: Codebook(cfg.codebook_size, cfg.latent_dim, rng,
                            decay=cfg.ema_decay, epsilon=cfg.ema_epsilon)
            for level in LEVELS
        }

    def encode(self, mel: Tensor):
        return self.encoder(mel)

    def decode(self, h_bot: Tensor, h_mid: Tensor, h_top: Tensor) -> Tensor:
        return self.decoder(h_bot, h_mid, h_top)

    def ctc_logits(self, h_top: Tensor) -> Tensor:
        """(B, L, D) -> (B, L, P+1)."""
        b, l, d = h_top.shape
        flat = self.ctc_head(h_top.reshape(b * l, d))
        return flat.reshape(b, l, self.cfg.ctc_vocab)

    def codes_to_latents(self, codes: np.ndarray, level: str) -> Tensor:
        return Tensor(self.codebooks[level].prototypes[np.asarray(codes, dtype=np.intp)])

    def encode_codes(self, mel: Tensor) -> dict[str, np.ndarray]:
        """Mel -> per-level code indices (no gradients)."""
        with nn.no_grad():
            h_bot, h_mid, h_top = self.encode(mel)
        return {
            "bottom": self.codebooks["bottom"].lookup_codes(h_bot.data),
            "middle": self.codebooks["middle"].lookup_codes(h_mid.data),
            "top": self.codebooks["top"].lookup_codes(h_top.data),
        }

    def training_losses(self, mel: Tensor, targets: list[list[int]] | None,
                        quantizer: str = "ste",
                        frozen_codes: dict[str, np.ndarray] | None = None):
        """One forward pass of the full objective.

        quantizer "ste": decoder sees prototypes, straight-through gradients.
        quantizer "identity": decoder sees the continuous latents; together
        with `frozen_codes` (a fixed assignment) the loss is smooth, which is
        what finite-difference checks need.

        Returns (total, report, aux) where aux carries latents and codes for
        the EMA update and diagnostics.
        """
        if quantizer not in ("ste", "identity"):
            raise ConfigError(f"unknown quantizer mode {quantizer!r}")
        h_bot, h_mid, h_top = self.encode(mel)
        levels = {"bottom": h_bot, "middle": h_mid, "top": h_top}
        codes, quantized, commits = {}, {}, {}
        for level, h in levels.items():
            cb = self.codebooks[level]
            cds = frozen_codes[level] if frozen_codes else cb.lookup_codes(h.data)
            proto = cb.prototypes[cds]
            if quantizer == "ste":
                h_q = nn.straight_through(h, proto)
            else:
                h_q = h
            diff = h - Tensor(proto)
            codes[level] = cds
            quantized[level] = h_q
            commits[level] = (diff * diff).sum(axis=-1).mean()
        mel_hat = self.decode(quantized["bottom"], quantized["middle"], quantized["top"])

        ctc_total = None
        n_ctc = 0
        if targets is not None and self.cfg.ctc_weight > 0:
            src = quantized["top"] if self.cfg.ctc_on == "post" else levels["top"]
            logits = self.ctc_logits(src)
            per_clip = []
            for i, y in enumerate(targets):
                if not y:
                    continue
                per_clip.append(ctc_log_likelihood(logits[i], y))
            if per_clip:
                n_ctc = len(per_clip)
                acc = per_clip[0]
                for extra in per_clip[1:]:
                    acc = acc + extra
                ctc_total = acc * (1.0 / n_ctc)
        total, report = vqvae_loss(
            mel, mel_hat, (commits["top"], commits["middle"], commits["bottom"]),
            ctc_total, self.cfg.commit_weight, self.cfg.ctc_weight,
        )
        aux = {"latents": levels, "codes": codes, "quantized": quantized,
               "mel_hat": mel_hat, "n_ctc": n_ctc}
        return total, report, aux

    def ema_step(self, aux: dict) -> None:
        for level in LEVELS:
            ema_update(self.codebooks[level], aux["latents"][level].data, aux["codes"][level])

    def config_dict(self) -> dict[str, str]:
        cfg = self.cfg
        return {f"vqvae.{k}": str(v) for k, v in vars(cfg).items()}
