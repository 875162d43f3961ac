"""Neural layers with hand-written backward passes.

The convolution and GRU kernels are fused: one graph node per call (per
step for the GRU cell), with the time loop and BPTT done in numpy inside
the node. Shapes follow the (batch, channels, time) convention for convs
and (batch, time, features) for recurrent layers; 2-D inputs are treated
as batch size 1 where noted.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .module import Module
from .tensor import (
    Parameter,
    Tensor,
    _accum,
    _node,
    _wrap,
    concat,
    default_dtype,
    gather_rows,
)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in tensor {name!r}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Same-padded 1-D cross-correlation.

    x: (B, C_in, T) or (C_in, T); w: (C_out, C_in/groups, K); b: (C_out,).
    T is right-padded with zeros to a multiple of `stride` first, then the
    output length is exactly that padded length divided by `stride`.
    """
    x, w = _wrap(x), _wrap(w)
    if stride < 1 or dilation < 1:
        raise ConfigError("stride and dilation must be >= 1")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be (B, C, T) or (C, T), got {x.shape}")
    bsz, c_in, t_in = xd.shape
    if w.ndim != 3:
        raise DimensionError(f"conv1d weight must be (C_out, C_in/groups, K), got {w.shape}")
    c_out, c_in_g, k = w.data.shape
    if c_in % groups != 0:
        raise DimensionError(f"input channel axis ({c_in}) not divisible by groups ({groups})")
    if c_out % groups != 0:
        raise DimensionError(f"output channel axis ({c_out}) not divisible by groups ({groups})")
    if c_in_g != c_in // groups:
        raise DimensionError(
            f"weight axis 1 is {c_in_g}, expected C_in/groups = {c_in // groups}"
        )

    t_strided = -(-t_in // stride) * stride
    t_out = t_strided // stride
    k_eff = (k - 1) * dilation + 1
    total_pad = max(0, k_eff - stride)
    left = total_pad // 2
    right = (t_strided - t_in) + (total_pad - left)
    x_pad = np.pad(xd, ((0, 0), (0, 0), (left, right)))

    sb, sc, st = x_pad.strides
    col = np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(bsz, c_in, k, t_out),
        strides=(sb, sc, dilation * st, stride * st),
        writeable=False,
    )
    col = np.ascontiguousarray(col)

    if groups == 1:
        out = np.matmul(w.data.reshape(c_out, c_in * k), col.reshape(bsz, c_in * k, t_out))
    else:
        cg, og = c_in // groups, c_out // groups
        colg = col.reshape(bsz, groups, cg * k, t_out)
        out = np.empty((bsz, c_out, t_out), dtype=xd.dtype)
        for gi in range(groups):
            wg = w.data[gi * og:(gi + 1) * og].reshape(og, cg * k)
            out[:, gi * og:(gi + 1) * og] = np.matmul(wg, colg[:, gi])
    if b is not None:
        out = out + b.data[:, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = g[None] if squeeze else g
        if b is not None:
            _accum(b, g.sum(axis=(0, 2)))
        if groups == 1:
            gw = np.einsum("bot,bft->of", g, col.reshape(bsz, c_in * k, t_out))
            _accum(w, gw.reshape(w.data.shape))
            dcol = np.matmul(w.data.reshape(c_out, c_in * k).T, g)
            dcol = dcol.reshape(bsz, c_in, k, t_out)
        else:
            cg, og = c_in // groups, c_out // groups
            colg = col.reshape(bsz, groups, cg * k, t_out)
            gw = np.empty_like(w.data)
            dcolg = np.empty((bsz, groups, cg * k, t_out), dtype=g.dtype)
            for gi in range(groups):
                gg = g[:, gi * og:(gi + 1) * og]
                gw[gi * og:(gi + 1) * og] = np.einsum(
                    "bot,bft->of", gg, colg[:, gi]
                ).reshape(og, cg, k)
                wg = w.data[gi * og:(gi + 1) * og].reshape(og, cg * k)
                dcolg[:, gi] = np.matmul(wg.T, gg)
            _accum(w, gw)
            dcol = dcolg.reshape(bsz, c_in, k, t_out)
        dx_pad = np.zeros_like(x_pad)
        span = stride * (t_out - 1) + 1
        for ki in range(k):
            dx_pad[:, :, ki * dilation: ki * dilation + span: stride] += dcol[:, :, ki, :]
        dx = dx_pad[:, :, left:left + t_in]
        _accum(x, dx[0] if squeeze else dx)

    out_data = out[0] if squeeze else out
    return _node(out_data, parents, backward)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, groups: int = 1, bias: bool = True):
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        fan_in = (c_in // groups) * kernel
        self.w = Parameter(uniform_init(rng, (c_out, c_in // groups, kernel), fan_in))
        self.b = Parameter(np.zeros(c_out, dtype=default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b, stride=self.stride,
                      dilation=self.dilation, groups=self.groups)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------
#
# Update rule (z update gate, r reset gate, c candidate):
#   z = sigmoid(Wx_z x + Wh_z h + b_z)
#   r = sigmoid(Wx_r x + Wh_r h + b_r)
#   c = tanh(Wx_c x + r * (Wh_c h) + b_c)
#   h' = (1 - z) * h + z * c


def _gru_gates(gx_t: np.ndarray, gh: np.ndarray, hidden: int):
    z = 1.0 / (1.0 + np.exp(-(gx_t[:, :hidden] + gh[:, :hidden])))
    r = 1.0 / (1.0 + np.exp(-(gx_t[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])))
    c = np.tanh(gx_t[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    return z, r, c


def gru_seq(x: Tensor, h0: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
            name: str = "gru") -> Tensor:
    """Run a GRU over a full sequence. x (B, T, D_in), h0 (B, H) -> (B, T, H)."""
    x, h0 = _wrap(x), _wrap(h0)
    _check_finite(x.data, f"{name}.x")
    _check_finite(h0.data, f"{name}.h0")
    bsz, t_len, d_in = x.data.shape
    hidden = h0.data.shape[1]
    if wx.data.shape != (d_in, 3 * hidden):
        raise DimensionError(f"{name}: Wx shape {wx.data.shape} != ({d_in}, {3 * hidden})")
    if wh.data.shape != (hidden, 3 * hidden):
        raise DimensionError(f"{name}: Wh shape {wh.data.shape} != ({hidden}, {3 * hidden})")

    gx = x.data.reshape(bsz * t_len, d_in) @ wx.data + b.data
    gx = gx.reshape(bsz, t_len, 3 * hidden)
    h = h0.data
    outs = np.empty((bsz, t_len, hidden), dtype=x.data.dtype)
    zs = np.empty_like(outs)
    rs = np.empty_like(outs)
    cs = np.empty_like(outs)
    ghc = np.empty_like(outs)
    for t in range(t_len):
        gh = h @ wh.data
        z, r, c = _gru_gates(gx[:, t], gh, hidden)
        zs[:, t], rs[:, t], cs[:, t], ghc[:, t] = z, r, c, gh[:, 2 * hidden:]
        h = (1.0 - z) * h + z * c
        outs[:, t] = h

    def backward(g):
        dgx = np.empty((bsz, t_len, 3 * hidden), dtype=g.dtype)
        dwh = np.zeros_like(wh.data)
        dh = np.zeros((bsz, hidden), dtype=g.dtype)
        for t in range(t_len - 1, -1, -1):
            h_prev = outs[:, t - 1] if t > 0 else h0.data
            z, r, c = zs[:, t], rs[:, t], cs[:, t]
            dh_t = g[:, t] + dh
            dz = dh_t * (c - h_prev)
            dc = dh_t * z
            dh = dh_t * (1.0 - z)
            da_c = dc * (1.0 - c * c)
            dr = da_c * ghc[:, t]
            dgh_c = da_c * r
            dz_pre = dz * z * (1.0 - z)
            dr_pre = dr * r * (1.0 - r)
            dgx[:, t, :hidden] = dz_pre
            dgx[:, t, hidden:2 * hidden] = dr_pre
            dgx[:, t, 2 * hidden:] = da_c
            dgh = np.concatenate([dz_pre, dr_pre, dgh_c], axis=1)
            dwh += h_prev.T @ dgh
            dh += dgh @ wh.data.T
        _accum(wh, dwh)
        flat = dgx.reshape(bsz * t_len, 3 * hidden)
        _accum(b, flat.sum(axis=0))
        _accum(wx, x.data.reshape(bsz * t_len, d_in).T @ flat)
        _accum(x, (flat @ wx.data.T).reshape(bsz, t_len, d_in))
        _accum(h0, dh)

    return _node(outs, (x, h0, wx, wh, b), backward)


def gru_cell(x: Tensor, h_prev: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
             name: str = "gru_cell") -> Tensor:
    """One GRU step. x (B, D_in), h_prev (B, H) -> (B, H)."""
    x, h_prev = _wrap(x), _wrap(h_prev)
    _check_finite(x.data, f"{name}.x")
    _check_finite(h_prev.data, f"{name}.h_prev")
    hidden = h_prev.data.shape[1]
    gx = x.data @ wx.data + b.data
    gh = h_prev.data @ wh.data
    z, r, c = _gru_gates(gx, gh, hidden)
    out = (1.0 - z) * h_prev.data + z * c

    def backward(g):
        dz = g * (c - h_prev.data)
        dc = g * z
        dh = g * (1.0 - z)
        da_c = dc * (1.0 - c * c)
        dr = da_c * gh[:, 2 * hidden:]
        dgh_c = da_c * r
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dgx = np.concatenate([dz_pre, dr_pre, da_c], axis=1)
        dgh = np.concatenate([dz_pre, dr_pre, dgh_c], axis=1)
        _accum(b, dgx.sum(axis=0))
        _accum(wx, x.data.T @ dgx)
        _accum(wh, h_prev.data.T @ dgh)
        _accum(x, dgx @ wx.data.T)
        _accum(h_prev, dh + dgh @ wh.data.T)

    return _node(out, (x, h_prev, wx, wh, b), backward)


class GRU(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, name: str = "gru"):
        self.hidden = hidden
        self.name = name
        self.wx = Parameter(uniform_init(rng, (d_in, 3 * hidden), d_in))
        self.wh = Parameter(uniform_init(rng, (hidden, 3 * hidden), hidden))
        self.b = Parameter(np.zeros(3 * hidden, dtype=default_dtype()))

    def seq(self, x: Tensor, h0: Tensor | None = None) -> Tensor:
        if h0 is None:
            h0 = Tensor(np.zeros((x.shape[0], self.hidden), dtype=x.dtype))
        return gru_seq(x, h0, self.wx, self.wh, self.b, name=self.name)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self.wx, self.wh, self.b, name=self.name)

    def init_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden), dtype=default_dtype()))


class BiGRU(Module):
    """Forward and backward GRU over (B, T, D); output (B, T, 2H)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, name: str = "bigru"):
        self.fw = GRU(d_in, hidden, rng, name=f"{name}.fw")
        self.bw = GRU(d_in, hidden, rng, name=f"{name}.bw")

    def __call__(self, x: Tensor) -> Tensor:
        fwd = self.fw.seq(x)
        rev = self.bw.seq(x[:, ::-1])
        return concat([fwd, rev[:, ::-1]], axis=2)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, n_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, T) per group of channels to zero mean, unit variance."""
    x = _wrap(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    bsz, c, t = xd.shape
    if c % n_groups != 0:
        raise ConfigError(f"channels ({c}) not divisible by n_groups ({n_groups})")
    grp = xd.reshape(bsz, n_groups, (c // n_groups) * t)
    mu = grp.mean(axis=2, keepdims=True)
    var = grp.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grp - mu) * inv).reshape(bsz, c, t)
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        g3 = g[None] if squeeze else g
        _accum(gamma, (g3 * xhat).sum(axis=(0, 2)))
        _accum(beta, g3.sum(axis=(0, 2)))
        dxh = (g3 * gamma.data[None, :, None]).reshape(bsz, n_groups, -1)
        xh = xhat.reshape(bsz, n_groups, -1)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                    - xh * (dxh * xh).mean(axis=2, keepdims=True))
        dx = dx.reshape(bsz, c, t)
        _accum(x, dx[0] if squeeze else dx)

    return _node(out[0] if squeeze else out, (x, gamma, beta), backward)


class GroupNorm(Module):
    def __init__(self, channels: int, n_groups: int):
        if channels % n_groups != 0:
            raise ConfigError(f"channels ({channels}) not divisible by n_groups ({n_groups})")
        self.n_groups = n_groups
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.n_groups, self.gamma, self.beta)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of x per row."""
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        dxh = g * gamma.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx)

    return _node(out, (x, gamma, beta), backward)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(dim, dtype=default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


# ---------------------------------------------------------------------------
# dense / embedding
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = Parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.b = Parameter(np.zeros(d_out, dtype=default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = Parameter((0.1 * rng.standard_normal((vocab, dim))).astype(default_dtype()))

    def __call__(self, ids) -> Tensor:
        return gather_rows(self.table, ids)
