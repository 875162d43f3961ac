"""Two-part language model over the three code streams.

Part one maps a phoneme sequence to top-level codes with a recurrent
seq2seq decoder and location-sensitive attention. Part two models the
middle and bottom codes jointly as one interleaved sequence with a causal
linear-attention stack, conditioned on the top codes through a dilated
convolutional upsampler and tagged with a period-6 tick embedding.

Sampling is nucleus-based and fully deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, InputError
from .lexicon import PhonemeSequence
from .nn import Module, Parameter, Tensor

MID, BOT = 0, 1


@dataclass
class LmConfig:
    n_phonemes: int = 10
    codebook_size: int = 256
    enc_embed: int = 32
    enc_channels: int = 64
    enc_hidden: int = 32
    attn_dim: int = 64
    attn_filters: int = 32
    attn_kernel: int = 31
    prenet_dim: int = 48
    prenet_dropout: float = 0.5
    dec_embed: int = 32
    dec_hidden: int = 96
    mixed_dim: int = 96
    mixed_layers: int = 2
    mixed_ffn: int = 192
    ups_embed: int = 48
    ups_channels: int = 96
    ups_dilations: tuple = (1, 2, 4, 8)
    max_top_len: int = 256

    @property
    def start_id(self) -> int:
        return self.codebook_size

    @property
    def stop_id(self) -> int:
        return self.codebook_size


# ---------------------------------------------------------------------------
# interleaved mid/bottom layout
# ---------------------------------------------------------------------------


@dataclass
class MixedSequence:
    """Tokens in the order (M1, M2, B1, B2, B3, B4, M3, M4, B5, ...)."""

    tokens: np.ndarray
    levels: np.ndarray  # MID or BOT per position

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.tokens.shape != self.levels.shape or self.tokens.ndim != 1:
            raise InputError("tokens and levels must be flat arrays of equal length")
        if self.tokens.size % 6 != 0:
            raise InputError(f"mixed length {self.tokens.size} not divisible by 6")

    def __len__(self):
        return self.tokens.size


def tick_index(position: int) -> int:
    """1-based slot within a group; positions 1 and 7 share tick 1."""
    if position < 1:
        raise InputError(f"positions are 1-based, got {position}")
    return (position - 1) % 6 + 1


def mixed_levels(n_groups: int) -> np.ndarray:
    return np.tile(np.array([MID, MID, BOT, BOT, BOT, BOT]), n_groups)


def interleave(mid, bot) -> MixedSequence:
    mid = np.asarray(mid, dtype=np.int64)
    bot = np.asarray(bot, dtype=np.int64)
    if mid.size % 2 != 0 or bot.size != 2 * mid.size:
        raise InputError(f"need lengths (2L, 4L), got mid={mid.size} bot={bot.size}")
    groups = mid.size // 2
    tokens = np.empty(6 * groups, dtype=np.int64)
    view = tokens.reshape(groups, 6)
    view[:, 0:2] = mid.reshape(groups, 2)
    view[:, 2:6] = bot.reshape(groups, 4)
    return MixedSequence(tokens=tokens, levels=mixed_levels(groups))


def deinterleave(mix: MixedSequence) -> tuple[np.ndarray, np.ndarray]:
    groups = len(mix) // 6
    view = mix.tokens.reshape(groups, 6)
    return view[:, 0:2].reshape(-1).copy(), view[:, 2:6].reshape(-1).copy()


@dataclass
class CodeTriple:
    top: np.ndarray
    middle: np.ndarray
    bottom: np.ndarray

    def __post_init__(self):
        self.top = np.asarray(self.top, dtype=np.int64)
        self.middle = np.asarray(self.middle, dtype=np.int64)
        self.bottom = np.asarray(self.bottom, dtype=np.int64)
        if not (self.middle.size == 2 * self.top.size
                and self.bottom.size == 4 * self.top.size):
            raise InputError(
                f"code lengths must be (L, 2L, 4L), got "
                f"{self.top.size}/{self.middle.size}/{self.bottom.size}"
            )


# ---------------------------------------------------------------------------
# lyrics encoder and location-sensitive attention
# ---------------------------------------------------------------------------


@dataclass
class LyricsMemory:
    values: Tensor       # (N, D_mem)
    processed: Tensor    # (N, D_attn), memory side of the additive energy
    mask: np.ndarray     # (N,) bool


@dataclass
class AttentionState:
    prev: Tensor         # (N,), lies on the simplex
    cumulative: Tensor   # (N,), running sum of emitted weights


class LyricsEncoder(Module):
    """Phoneme embedding, two convolutions, bidirectional GRU."""

    def __init__(self, cfg: LmConfig, rng):
        self.embed = nn.Embedding(cfg.n_phonemes + 1, cfg.enc_embed, rng)
        self.conv1 = nn.Conv1d(cfg.enc_embed, cfg.enc_channels, 5, rng)
        self.conv2 = nn.Conv1d(cfg.enc_channels, cfg.enc_channels, 5, rng)
        self.gru = nn.BiGRU(cfg.enc_channels, cfg.enc_hidden, rng, name="lyrics_enc")

    def __call__(self, phoneme_ids) -> Tensor:
        ids = np.asarray(phoneme_ids, dtype=np.intp)
        if ids.size == 0:
            raise InputError("empty phoneme sequence")
        if ids.max() >= self.embed.table.shape[0]:
            raise IndexError(f"phoneme id {ids.max()} outside embedding table")
        x = self.embed(ids)                       # (N, E)
        x = nn.transpose(x, (1, 0)).reshape(1, -1, ids.size)
        x = nn.elu(self.conv1(x))
        x = nn.elu(self.conv2(x))
        x = nn.transpose(x, (0, 2, 1))            # (1, N, C)
        mem = self.gru(x)                         # (1, N, 2H)
        return mem.reshape(ids.size, -1)


class LocationAttention(Module):
    """Additive attention whose energies also see convolved prev/cumulative weights."""

    def __init__(self, d_query: int, d_mem: int, cfg: LmConfig, rng):
        d = cfg.attn_dim
        self.w_query = nn.Linear(d_query, d, rng, bias=False)
        self.w_mem = nn.Linear(d_mem, d, rng, bias=False)
        self.w_loc = nn.Linear(cfg.attn_filters, d, rng, bias=False)
        self.loc_conv = nn.Conv1d(2, cfg.attn_filters, cfg.attn_kernel, rng, bias=False)
        self.bias = Parameter(np.zeros(d, dtype=nn.default_dtype()))
        self.v = Parameter(nn.uniform_init(rng, (d, 1), d))

    def project_memory(self, values: Tensor) -> Tensor:
        return self.w_mem(values)

    def initial_state(self, n: int) -> AttentionState:
        prev = np.zeros(n, dtype=nn.default_dtype())
        prev[0] = 1.0
        return AttentionState(prev=Tensor(prev),
                              cumulative=Tensor(np.zeros(n, dtype=nn.default_dtype())))

    def step(self, query: Tensor, mem: LyricsMemory, state: AttentionState
             ) -> tuple[Tensor, Tensor, AttentionState]:
        """query (1, D_q) -> (context (1, D_mem), weights (N,), new state)."""
        n = mem.values.shape[0]
        if not mem.mask.any():
            raise InputError("attention memory is fully masked")
        if state.prev.shape[0] != n:
            raise ContractError(f"attention state built for N={state.prev.shape[0]}, memory has N={n}")
        loc_in = nn.concat([state.prev.reshape(1, 1, n),
                            state.cumulative.reshape(1, 1, n)], axis=1)
        feats = self.loc_conv(loc_in)                       # (1, F, N)
        loc = self.w_loc(nn.transpose(feats.reshape(-1, n), (1, 0)))  # (N, D)
        energy = nn.tanh(self.w_query(query) + mem.processed + loc + self.bias)
        scores = (energy @ self.v).reshape(n)
        if not mem.mask.all():
            scores = scores + Tensor(np.where(mem.mask, 0.0, -1e30))
        weights = nn.softmax(scores)
        context = weights.reshape(1, n) @ mem.values
        new_state = AttentionState(prev=weights, cumulative=state.cumulative + weights)
        return context, weights, new_state


# ---------------------------------------------------------------------------
# top-level decoder
# ---------------------------------------------------------------------------


@dataclass
class TopDecoderState:
    h_attn: Tensor
    h_dec: Tensor
    context: Tensor
    attention: AttentionState
    memory_len: int


class Prenet(Module):
    def __init__(self, d_in: int, d_out: int, rng, dropout: float):
        self.fc1 = nn.Linear(d_in, d_out, rng)
        self.fc2 = nn.Linear(d_out, d_out, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = nn.elu(self.fc1(x))
        if rng is not None:
            x = nn.dropout(x, self.dropout, rng)
        x = nn.elu(self.fc2(x))
        if rng is not None:
            x = nn.dropout(x, self.dropout, rng)
        return x


class TopDecoder(Module):
    """Embed previous code, prenet, two GRUs with attention, logits over M+1."""

    def __init__(self, cfg: LmConfig, rng):
        self.cfg = cfg
        d_mem = 2 * cfg.enc_hidden
        self.embed = nn.Embedding(cfg.codebook_size + 1, cfg.dec_embed, rng)  # +1: START
        self.prenet = Prenet(cfg.dec_embed, cfg.prenet_dim, rng, cfg.prenet_dropout)
        self.attention = LocationAttention(cfg.dec_hidden, d_mem, cfg, rng)
        self.gru_attn = nn.GRU(cfg.prenet_dim + d_mem, cfg.dec_hidden, rng, name="top_attn_gru")
        self.gru_dec = nn.GRU(cfg.dec_hidden + d_mem, cfg.dec_hidden, rng, name="top_dec_gru")
        self.out = nn.Linear(cfg.dec_hidden + d_mem, cfg.codebook_size + 1, rng)  # +1: STOP

    def build_memory(self, values: Tensor, mask: np.ndarray | None = None) -> LyricsMemory:
        n = values.shape[0]
        if mask is None:
            mask = np.ones(n, dtype=bool)
        return LyricsMemory(values=values, processed=self.attention.project_memory(values),
                            mask=mask)

    def initial_state(self, mem: LyricsMemory) -> TopDecoderState:
        d_mem = mem.values.shape[1]
        dt = nn.default_dtype()
        return TopDecoderState(
            h_attn=self.gru_attn.init_state(1),
            h_dec=self.gru_dec.init_state(1),
            context=Tensor(np.zeros((1, d_mem), dtype=dt)),
            attention=self.attention.initial_state(mem.values.shape[0]),
            memory_len=mem.values.shape[0],
        )

    def step(self, prev_code: int, state: TopDecoderState, mem: LyricsMemory,
             dropout_rng: np.random.Generator | None = None
             ) -> tuple[Tensor, Tensor, TopDecoderState]:
        """prev_code in [0, M] (M = START) -> (logits (1, M+1), weights (N,), state)."""
        if state.memory_len != mem.values.shape[0]:
            raise ContractError(
                f"decoder state built for memory length {state.memory_len}, "
                f"got {mem.values.shape[0]}"
            )
        emb = self.embed([prev_code])
        pre = self.prenet(emb, dropout_rng)
        h_attn = self.gru_attn.step(nn.concat([pre, state.context], axis=1), state.h_attn)
        context, weights, attn_state = self.attention.step(h_attn, mem, state.attention)
        h_dec = self.gru_dec.step(nn.concat([h_attn, context], axis=1), state.h_dec)
        logits = self.out(nn.concat([h_dec, context], axis=1))
        new_state = TopDecoderState(h_attn=h_attn, h_dec=h_dec, context=context,
                                    attention=attn_state, memory_len=state.memory_len)
        return logits, weights, new_state

    def teacher_forced(self, codes, mem: LyricsMemory,
                       dropout_rng: np.random.Generator | None = None,
                       include_stop: bool = True):
        """Unroll on ground-truth codes.

        Returns (logits (n_steps, M+1), attention_weights (n_steps, N)); step t
        consumes START for t=0 and codes[t-1] after, so predicting L codes reads
        L-1 previous codes plus START. With include_stop an extra step consumes
        the final code to predict STOP.
        """
        codes = [int(c) for c in codes]
        inputs = [self.cfg.start_id] + codes
        if not include_stop:
            inputs = inputs[:-1]
        state = self.initial_state(mem)
        rows, weight_rows = [], []
        for prev in inputs:
            logits, weights, state = self.step(prev, state, mem, dropout_rng)
            rows.append(logits)
            weight_rows.append(weights.reshape(1, -1))
        return nn.concat(rows, axis=0), nn.concat(weight_rows, axis=0)


# ---------------------------------------------------------------------------
# tick embedding and upsampler
# ---------------------------------------------------------------------------


class TickEmbedding(Module):
    """Learnable period-6 position tags."""

    def __init__(self, dim: int, rng):
        self.table = Parameter((0.1 * rng.standard_normal((6, dim))).astype(nn.default_dtype()))

    def __call__(self, positions) -> Tensor:
        idx = np.asarray([tick_index(int(p)) - 1 for p in np.atleast_1d(positions)])
        return nn.gather_rows(self.table, idx)


class Upsampler(Module):
    """Spread top codes over the 6x finer mixed grid and widen the receptive field."""

    def __init__(self, cfg: LmConfig, rng):
        c = cfg.ups_channels
        self.embed = nn.Embedding(cfg.codebook_size, cfg.ups_embed, rng)
        self.inp = nn.Conv1d(cfg.ups_embed, c, 1, rng)
        self.blocks = [nn.Conv1d(c, c, 3, rng, dilation=d) for d in cfg.ups_dilations]
        self.out = nn.Conv1d(c, cfg.mixed_dim, 1, rng)

    def __call__(self, top_codes) -> Tensor:
        codes = np.asarray(top_codes, dtype=np.intp)
        if codes.size == 0:
            raise InputError("cannot upsample an empty code sequence")
        x = self.embed(codes)                              # (L, E)
        x = nn.transpose(x, (1, 0)).reshape(1, -1, codes.size)
        x = nn.repeat(x, 6, axis=2)                        # (1, E, 6L)
        x = self.inp(x)
        for conv in self.blocks:
            x = x + conv(nn.elu(x))
        x = self.out(x)                                    # (1, D, 6L)
        return nn.transpose(x.reshape(-1, 6 * codes.size), (1, 0))


# ---------------------------------------------------------------------------
# causal linear attention
# ---------------------------------------------------------------------------


def _phi(u: Tensor) -> Tensor:
    return nn.elu(u) + 1.0


@dataclass
class LinearAttentionState:
    """Running kernel statistics; positions must be fed strictly in order."""

    s: np.ndarray  # (d_k, d_v)
    z: np.ndarray  # (d_k,)
    position: int = 0


def linear_attention_quadratic(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Masked quadratic form of kernelized causal attention; q, k, v are (T, d)."""
    t = q.shape[0]
    pq, pk = _phi(q), _phi(k)
    scores = pq @ nn.transpose(pk, (1, 0))
    mask = Tensor(np.tril(np.ones((t, t))))
    masked = scores * mask
    num = masked @ v
    den = masked @ Tensor(np.ones((t, 1))) + 1e-6
    return num / den


def linear_attention_step(state: LinearAttentionState, q: np.ndarray, k: np.ndarray,
                          v: np.ndarray, position: int) -> tuple[np.ndarray, LinearAttentionState]:
    """Recurrent form: S += phi(k) v^T, z += phi(k), y = phi(q) S / (phi(q).z + 1e-6)."""
    if position != state.position + 1:
        raise ContractError(
            f"positions must be consumed in order: state at {state.position}, got {position}"
        )
    pq = np.where(q > 0, q + 1.0, np.exp(np.minimum(q, 0.0)))
    pk = np.where(k > 0, k + 1.0, np.exp(np.minimum(k, 0.0)))
    s = state.s + pk[:, None] * v[None, :]
    z = state.z + pk
    y = (pq @ s) / (pq @ z + 1e-6)
    return y, LinearAttentionState(s=s, z=z, position=position)


class MixedBlock(Module):
    """Pre-norm residual block: linear attention then a feed-forward sublayer."""

    def __init__(self, cfg: LmConfig, rng):
        d = cfg.mixed_dim
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.w_q = nn.Linear(d, d, rng, bias=False)
        self.w_k = nn.Linear(d, d, rng, bias=False)
        self.w_v = nn.Linear(d, d, rng, bias=False)
        self.w_o = nn.Linear(d, d, rng, bias=False)
        self.ff1 = nn.Linear(d, cfg.mixed_ffn, rng)
        self.ff2 = nn.Linear(cfg.mixed_ffn, d, rng)

    def batched(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        att = linear_attention_quadratic(self.w_q(h), self.w_k(h), self.w_v(h))
        x = x + self.w_o(att)
        return x + self.ff2(nn.elu(self.ff1(self.norm2(x))))

    def initial_state(self) -> LinearAttentionState:
        d = self.w_q.w.shape[0]
        dt = nn.default_dtype()
        return LinearAttentionState(s=np.zeros((d, d), dtype=dt), z=np.zeros(d, dtype=dt))

    def step(self, x: Tensor, state: LinearAttentionState, position: int
             ) -> tuple[Tensor, LinearAttentionState]:
        h = self.norm1(x)
        q, k, v = self.w_q(h), self.w_k(h), self.w_v(h)
        y, state = linear_attention_step(
            state, q.data[0], k.data[0], v.data[0], position
        )
        x = x + self.w_o(Tensor(y[None, :]))
        return x + self.ff2(nn.elu(self.ff1(self.norm2(x)))), state


@dataclass
class MixedDecoderState:
    layers: list
    position: int = 0


class MixedDecoder(Module):
    """Joint autoregressive model of the interleaved mid/bottom sequence."""

    def __init__(self, cfg: LmConfig, rng):
        d = cfg.mixed_dim
        self.cfg = cfg
        self.embed_mid = nn.Embedding(cfg.codebook_size, d, rng)
        self.embed_bot = nn.Embedding(cfg.codebook_size, d, rng)
        self.start = Parameter((0.1 * rng.standard_normal(d)).astype(nn.default_dtype()))
        self.tick = TickEmbedding(d, rng)
        self.blocks = [MixedBlock(cfg, rng) for _ in range(cfg.mixed_layers)]
        self.norm = nn.LayerNorm(d)
        self.head_mid = nn.Linear(d, cfg.codebook_size, rng)
        self.head_bot = nn.Linear(d, cfg.codebook_size, rng)

    def _input_rows(self, mix: MixedSequence, conditioning: Tensor) -> Tensor:
        n = len(mix)
        if conditioning.shape[0] != n:
            raise InputError(
                f"conditioning rows ({conditioning.shape[0]}) != mixed length ({n})"
            )
        mid_pos = np.flatnonzero(mix.levels == MID)
        bot_pos = np.flatnonzero(mix.levels == BOT)
        emb_mid = self.embed_mid(mix.tokens[mid_pos])
        emb_bot = self.embed_bot(mix.tokens[bot_pos])
        perm = np.argsort(np.concatenate([mid_pos, bot_pos]), kind="stable")
        ordered = nn.concat([emb_mid, emb_bot], axis=0)[perm]
        prev = nn.concat([self.start.reshape(1, -1), ordered[: n - 1]], axis=0)
        ticks = self.tick(np.arange(1, n + 1))
        return prev + ticks + conditioning

    def hidden_states(self, mix: MixedSequence, conditioning: Tensor) -> Tensor:
        x = self._input_rows(mix, conditioning)
        for block in self.blocks:
            x = block.batched(x)
        return self.norm(x)

    def teacher_forced(self, mix: MixedSequence, conditioning: Tensor
                       ) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
        """Returns (mid logits, bot logits, mid positions, bot positions)."""
        hidden = self.hidden_states(mix, conditioning)
        mid_pos = np.flatnonzero(mix.levels == MID)
        bot_pos = np.flatnonzero(mix.levels == BOT)
        return (self.head_mid(hidden[mid_pos]), self.head_bot(hidden[bot_pos]),
                mid_pos, bot_pos)

    def initial_state(self) -> MixedDecoderState:
        return MixedDecoderState(layers=[b.initial_state() for b in self.blocks])

    def step(self, prev_token: int | None, prev_level: int, position: int,
             cond_row: Tensor, state: MixedDecoderState) -> tuple[np.ndarray, MixedDecoderState]:
        """One sampling step at 1-based `position`; prev_token None means start."""
        if position != state.position + 1:
            raise ContractError(
                f"mixed positions must advance by 1: state at {state.position}, got {position}"
            )
        if cond_row.shape != (1, self.cfg.mixed_dim):
            raise InputError(f"conditioning row shape {cond_row.shape} unexpected")
        if prev_token is None:
            emb = self.start.reshape(1, -1)
        elif prev_level == MID:
            emb = self.embed_mid([prev_token])
        else:
            emb = self.embed_bot([prev_token])
        x = emb + self.tick([position]) + cond_row
        new_layers = []
        for block, lstate in zip(self.blocks, state.layers):
            x, lstate = block.step(x, lstate, position)
            new_layers.append(lstate)
        x = self.norm(x)
        level = mixed_levels(1)[(position - 1) % 6]
        head = self.head_mid if level == MID else self.head_bot
        logits = head(x)
        return logits.data[0], MixedDecoderState(layers=new_layers, position=position)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    nucleus_p: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    max_top_len: int = 256

    def __post_init__(self):
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.max_top_len < 1:
            raise ConfigError("max_top_len must be >= 1")


def nucleus_sample(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Temperature softmax, keep the largest head of the sorted distribution whose
    cumulative probability stays within nucleus_p (at least one token), renormalize,
    draw with the supplied generator."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise InputError("non-finite logits in sampler")
    z = z / cfg.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    if cfg.nucleus_p >= 1.0:
        kept_ids = np.arange(p.size)
        kept_p = p
    else:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        keep = csum <= cfg.nucleus_p
        keep[0] = True
        kept_ids = order[keep]
        kept_p = p[kept_ids]
        kept_p = kept_p / kept_p.sum()
    r = rng.random()
    idx = int(np.searchsorted(np.cumsum(kept_p), r, side="right"))
    return int(kept_ids[min(idx, kept_ids.size - 1)])


# ---------------------------------------------------------------------------
# full model and generation
# ---------------------------------------------------------------------------


class LmModel(Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = LyricsEncoder(cfg, rng)
        self.top = TopDecoder(cfg, rng)
        self.upsampler = Upsampler(cfg, rng)
        self.mixed = MixedDecoder(cfg, rng)

    def encode_lyrics(self, phoneme_ids) -> LyricsMemory:
        return self.top.build_memory(self.encoder(phoneme_ids))

    def config_dict(self) -> dict[str, str]:
        out = {}
        for k, v in vars(self.cfg).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f"lm.{k}"] = str(v)
        return out


@dataclass
class GenerationResult:
    codes: CodeTriple
    truncated: bool = False
    primed_top: list = field(default_factory=list)


def _sample_section(lm: LmModel, memory: LyricsMemory, cfg: SamplerConfig,
                    rng: np.random.Generator, primed: CodeTriple | None = None
                    ) -> GenerationResult:
    stop = lm.cfg.stop_id
    state = lm.top.initial_state(memory)
    prev = lm.cfg.start_id
    prefix_top: list[int] = []
    if primed is not None and primed.top.size:
        for code in primed.top:
            _, _, state = lm.top.step(prev, state, memory)
            prev = int(code)
        prefix_top = [int(c) for c in primed.top]

    new_top: list[int] = []
    truncated = True
    budget = max(1, cfg.max_top_len - len(prefix_top))
    for step in range(budget):
        logits, _, state = lm.top.step(prev, state, memory)
        row = logits.data[0].copy()
        if step == 0:
            row[stop] = -1e30  # a section emits at least one code
        token = nucleus_sample(row, cfg, rng)
        if token == stop:
            truncated = False
            break
        new_top.append(token)
        prev = token

    all_top = prefix_top + new_top
    conditioning = lm.upsampler(all_top)
    mstate = lm.mixed.initial_state()
    prev_token: int | None = None
    prev_level = MID
    tokens = np.empty(6 * len(all_top), dtype=np.int64)
    levels = mixed_levels(len(all_top))
    primed_mix = interleave(primed.middle, primed.bottom) if primed is not None and primed.top.size else None
    n_primed = 0 if primed_mix is None else len(primed_mix)
    for pos in range(1, 6 * len(all_top) + 1):
        logits, mstate = lm.mixed.step(prev_token, prev_level, pos,
                                       conditioning[pos - 1].reshape(1, -1), mstate)
        if pos <= n_primed:
            token = int(primed_mix.tokens[pos - 1])
        else:
            token = nucleus_sample(logits, cfg, rng)
        tokens[pos - 1] = token
        prev_token, prev_level = token, levels[pos - 1]

    new_tokens = tokens[n_primed:]
    mid, bot = deinterleave(MixedSequence(tokens=new_tokens, levels=levels[n_primed:]))
    triple = CodeTriple(top=np.asarray(new_top), middle=mid, bottom=bot)
    return GenerationResult(codes=triple, truncated=truncated, primed_top=prefix_top)


def generate(ph: PhonemeSequence, lm: LmModel, cfg: SamplerConfig,
             rng: np.random.Generator | None = None) -> GenerationResult:
    """Sample a CodeTriple for one lyric; deterministic given (seed, inputs, weights)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    with nn.no_grad():
        memory = lm.encode_lyrics(ph.ids)
        return _sample_section(lm, memory, cfg, rng)


def windowed_generate(ph_sections: list[PhonemeSequence], lm: LmModel, cfg: SamplerConfig,
                      window: int, hop: int,
                      rng: np.random.Generator | None = None) -> GenerationResult:
    """Long-form sampling: each section is primed with the previous section's
    last (window - hop) top codes and their aligned mid/bottom codes; the
    primed prefix is dropped from the output."""
    if not ph_sections:
        raise InputError("windowed generation needs at least one section")
    if not (0 < hop <= window <= cfg.max_top_len):
        raise ConfigError(
            f"need 0 < hop <= window <= max_top_len, got hop={hop} window={window} "
            f"max_top_len={cfg.max_top_len}"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    overlap = window - hop
    tops: list[np.ndarray] = []
    mids: list[np.ndarray] = []
    bots: list[np.ndarray] = []
    truncated = False
    with nn.no_grad():
        for section in ph_sections:
            memory = lm.encode_lyrics(section.ids)
            primed = None
            if overlap > 0 and tops:
                all_top = np.concatenate(tops)
                n = min(overlap, all_top.size)
                primed = CodeTriple(
                    top=all_top[-n:],
                    middle=np.concatenate(mids)[-2 * n:],
                    bottom=np.concatenate(bots)[-4 * n:],
                )
            result = _sample_section(lm, memory, cfg, rng, primed=primed)
            truncated = truncated or result.truncated
            tops.append(result.codes.top)
            mids.append(result.codes.middle)
            bots.append(result.codes.bottom)
    triple = CodeTriple(top=np.concatenate(tops), middle=np.concatenate(mids),
                        bottom=np.concatenate(bots))
    return GenerationResult(codes=triple, truncated=truncated)
