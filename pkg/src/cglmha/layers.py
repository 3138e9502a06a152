"""
Differentiable building blocks: embedding lookup, same-length 1-D
convolution, GRU and LSTM cells and layers, scaled dot-product and
multi-head attention.

All layers accept batch-first input ``(B, L, D)``. The single-sequence form
``(L, D)`` (or ``(D,)`` for the cells) is accepted too and returned without
the batch axis. Recurrent weights act on the concatenation ``[h_prev, x_t]``,
hidden part first.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _param(arr, name):
    return Tensor(arr, requires_grad=True, dtype=arr.dtype, name=name)


def _zeros(n, dtype, name):
    return _param(np.zeros(n, dtype=dtype), name)


@dataclass
class EmbeddingParams:
    table: Tensor
    pad_index: int = 0
    coverage: Optional[float] = None  # share of vocabulary found in a pre-trained source

    def named(self, prefix="embedding"):
        return {f"{prefix}.table": self.table}

    @classmethod
    def init(cls, rng, vocab_size, dim, pad_index=0, dtype=np.float32):
        table = rng.uniform(-0.05, 0.05, size=(vocab_size, dim)).astype(dtype)
        table[pad_index] = 0
        return cls(_param(table, "embedding.table"), pad_index)

    def rezero_pad(self):
        self.table.data[self.pad_index] = 0


@dataclass
class ConvParams:
    kernels: Tensor  # (num_filters, width, in_dim)
    bias: Optional[Tensor] = None

    @property
    def width(self):
        return self.kernels.shape[1]

    def named(self, prefix="conv"):
        out = {f"{prefix}.kernels": self.kernels}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out

    @classmethod
    def init(cls, rng, in_dim, num_filters, width=3, bias=True, dtype=np.float32):
        if width % 2 == 0:
            raise ConfigError(f"convolution width must be odd, got {width}")
        k = uniform_init(rng, (num_filters, width, in_dim), width * in_dim, dtype)
        b = _zeros(num_filters, dtype, "conv.bias") if bias else None
        return cls(_param(k, "conv.kernels"), b)


@dataclass
class GruParams:
    W_r: Tensor
    W_z: Tensor
    W_h: Tensor
    b_r: Optional[Tensor] = None
    b_z: Optional[Tensor] = None
    b_h: Optional[Tensor] = None

    def __post_init__(self):
        if not (self.W_r.shape == self.W_z.shape == self.W_h.shape):
            raise ShapeError("GRU weight matrices must share one shape")

    @property
    def hidden(self):
        return self.W_r.shape[0]

    @property
    def in_dim(self):
        return self.W_r.shape[1] - self.hidden

    def named(self, prefix="gru"):
        names = ("W_r", "W_z", "W_h", "b_r", "b_z", "b_h")
        return {f"{prefix}.{n}": getattr(self, n) for n in names if getattr(self, n) is not None}

    @classmethod
    def init(cls, rng, in_dim, hidden, bias=True, dtype=np.float32):
        shape, fan = (hidden, hidden + in_dim), hidden + in_dim
        ws = [_param(uniform_init(rng, shape, fan, dtype), f"gru.W_{g}") for g in "rzh"]
        bs = [_zeros(hidden, dtype, f"gru.b_{g}") if bias else None for g in "rzh"]
        return cls(*ws, *bs)


@dataclass
class LstmParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    b_i: Optional[Tensor] = None
    b_f: Optional[Tensor] = None
    b_o: Optional[Tensor] = None
    b_c: Optional[Tensor] = None

    def __post_init__(self):
        if not (self.W_i.shape == self.W_f.shape == self.W_o.shape == self.W_c.shape):
            raise ShapeError("LSTM weight matrices must share one shape")

    @property
    def hidden(self):
        return self.W_i.shape[0]

    @property
    def in_dim(self):
        return self.W_i.shape[1] - self.hidden

    def named(self, prefix="lstm"):
        names = ("W_i", "W_f", "W_o", "W_c", "b_i", "b_f", "b_o", "b_c")
        return {f"{prefix}.{n}": getattr(self, n) for n in names if getattr(self, n) is not None}

    @classmethod
    def init(cls, rng, in_dim, hidden, bias=True, dtype=np.float32):
        shape, fan = (hidden, hidden + in_dim), hidden + in_dim
        ws = [_param(uniform_init(rng, shape, fan, dtype), f"lstm.W_{g}") for g in "ifoc"]
        bs = [_zeros(hidden, dtype, f"lstm.b_{g}") if bias else None for g in "ifoc"]
        return cls(*ws, *bs)


@dataclass
class MhaParams:
    W_Q: List[Tensor]
    W_K: List[Tensor]
    W_V: List[Tensor]
    W_O: Tensor
    heads: int = field(init=False)

    def __post_init__(self):
        self.heads = len(self.W_Q)
        if not (len(self.W_K) == len(self.W_V) == self.heads) or self.heads < 1:
            raise ConfigError("every head needs one query, key and value projection")
        model_dim, head_dim = self.W_Q[0].shape
        if self.heads * head_dim != model_dim or head_dim < 1:
            raise ConfigError(f"{self.heads} heads x {head_dim} != model dim {model_dim}")
        if self.W_O.shape != (model_dim, model_dim):
            raise ConfigError(f"output projection must be {model_dim}x{model_dim}")

    @property
    def model_dim(self):
        return self.W_O.shape[1]

    @property
    def head_dim(self):
        return self.W_Q[0].shape[1]

    def named(self, prefix="mha"):
        out = {}
        for i in range(self.heads):
            out[f"{prefix}.W_Q.{i}"] = self.W_Q[i]
            out[f"{prefix}.W_K.{i}"] = self.W_K[i]
            out[f"{prefix}.W_V.{i}"] = self.W_V[i]
        out[f"{prefix}.W_O"] = self.W_O
        return out

    @classmethod
    def init(cls, rng, model_dim, heads, dtype=np.float32):
        if heads < 1 or model_dim % heads:
            raise ConfigError(f"model dim {model_dim} is not divisible by {heads} heads")
        hd = model_dim // heads

        def proj(kind, i):
            return _param(uniform_init(rng, (model_dim, hd), model_dim, dtype), f"mha.W_{kind}.{i}")

        qs = [proj("Q", i) for i in range(heads)]
        ks = [proj("K", i) for i in range(heads)]
        vs = [proj("V", i) for i in range(heads)]
        wo = _param(uniform_init(rng, (model_dim, model_dim), model_dim, dtype), "mha.W_O")
        return cls(qs, ks, vs, wo)


def _batched(x, rank):
    """Promote an unbatched input to batch size 1; report whether we did."""
    if x.ndim == rank - 1:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected a rank-{rank} (or rank-{rank - 1}) input, got shape {x.shape}")
    return x, False


def _unbatch(x, squeeze):
    return T.reshape(x, x.shape[1:]) if squeeze else x


def _mask_array(mask, B, L):
    if mask is None:
        return np.ones((B, L), dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape != (B, L):
        raise ShapeError(f"mask shape {m.shape} does not match (batch, length) = {(B, L)}")
    return m


def embed(ids, params: EmbeddingParams) -> Tensor:
    """Rows of the embedding table for ``ids``; pad ids give zero rows."""
    return T.gather_rows(params.table, ids, skip=params.pad_index)


def conv1d_same(x: Tensor, params: ConvParams) -> Tensor:
    """Rectified 1-D convolution over the sequence axis, output length = input length."""
    k = params.width
    if k % 2 == 0:
        raise ConfigError(f"convolution width must be odd, got {k}")
    x, squeeze = _batched(x, 3)
    B, L, D = x.shape
    F = params.kernels.shape[0]
    if params.kernels.shape[2] != D:
        raise ShapeError(f"conv expects input dim {params.kernels.shape[2]}, got {D}")
    p = (k - 1) // 2
    xp = T.pad_zeros(x, 1, p, p) if p else x
    windows = T.concat([T.narrow(xp, 1, j, L) for j in range(k)], axis=2)
    w = T.transpose(T.reshape(params.kernels, (F, k * D)))
    out = T.linear(windows, w)
    if params.bias is not None:
        out = T.add_bias(out, params.bias)
    return _unbatch(T.relu(out), squeeze)


def _gate(hx, W, b):
    out = T.linear(hx, T.transpose(W))
    return T.add_bias(out, b) if b is not None else out


def gru_cell(x_t: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """One GRU step; a gate value of 1 keeps the previous state."""
    x_t, squeeze = _batched(x_t, 2)
    h_prev, _ = _batched(h_prev, 2)
    if h_prev.shape != (x_t.shape[0], params.hidden) or x_t.shape[1] != params.in_dim:
        raise ShapeError(
            f"gru_cell: x {x_t.shape}, h {h_prev.shape} vs hidden {params.hidden}, in {params.in_dim}"
        )
    hx = T.concat([h_prev, x_t], axis=1)
    r = T.sigmoid(_gate(hx, params.W_r, params.b_r))
    z = T.sigmoid(_gate(hx, params.W_z, params.b_z))
    cand = T.tanh(_gate(T.concat([r * h_prev, x_t], axis=1), params.W_h, params.b_h))
    h = z * h_prev + (1.0 - z) * cand
    return _unbatch(h, squeeze)


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams):
    """One LSTM step, returning ``(h_t, c_t)``."""
    x_t, squeeze = _batched(x_t, 2)
    h_prev, _ = _batched(h_prev, 2)
    c_prev, _ = _batched(c_prev, 2)
    want = (x_t.shape[0], params.hidden)
    if h_prev.shape != want or c_prev.shape != want or x_t.shape[1] != params.in_dim:
        raise ShapeError(
            f"lstm_cell: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} vs hidden {params.hidden}"
        )
    hx = T.concat([h_prev, x_t], axis=1)
    i = T.sigmoid(_gate(hx, params.W_i, params.b_i))
    f = T.sigmoid(_gate(hx, params.W_f, params.b_f))
    o = T.sigmoid(_gate(hx, params.W_o, params.b_o))
    cand = T.tanh(_gate(hx, params.W_c, params.b_c))
    c = f * c_prev + i * cand
    h = o * T.tanh(c)
    return _unbatch(h, squeeze), _unbatch(c, squeeze)


def _bias_or_zeros(parts, n, dtype):
    if all(b is None for b in parts):
        return T.Tensor(np.zeros(n, dtype=dtype), dtype=dtype)
    if any(b is None for b in parts):
        raise ConfigError("either all gate biases are present or none")
    return T.concat(parts, axis=0)


def _carry(new, old, m):
    # masked positions keep the previous state
    return new * m + old * (1.0 - m)


def gru_layer(x: Tensor, params: GruParams, mask=None, reverse=False, fused=True) -> Tensor:
    """Run a GRU over the sequence from a zero state; returns every hidden state.

    With ``fused=True`` the whole sequence is one tape node backed by the
    recurrent kernels; otherwise the layer is unrolled into ``gru_cell`` calls.
    """
    x, squeeze = _batched(x, 3)
    B, L, D = x.shape
    if D != params.in_dim:
        raise ShapeError(f"gru_layer expects input dim {params.in_dim}, got {D}")
    m = _mask_array(mask, B, L)
    H, dt = params.hidden, x.dtype
    if fused:
        Wrz = T.concat([params.W_r, params.W_z], axis=0)
        brz = _bias_or_zeros([params.b_r, params.b_z], 2 * H, dt)
        bh = _bias_or_zeros([params.b_h], H, dt)
        out = _fused_gru(x, Wrz, params.W_h, brz, bh, m, reverse)
    else:
        h = T.Tensor(np.zeros((B, H), dtype=dt), dtype=dt)
        steps = range(L - 1, -1, -1) if reverse else range(L)
        outs = [None] * L
        for t in steps:
            mt = T.Tensor(np.repeat(m[:, t, None], H, axis=1).astype(dt), dtype=dt)
            h = _carry(gru_cell(T.take(x, t, 1), h, params), h, mt)
            outs[t] = h
        out = T.stack(outs, axis=1)
    return _unbatch(out, squeeze)


def lstm_layer(x: Tensor, params: LstmParams, mask=None, reverse=False, fused=True) -> Tensor:
    """Unidirectional LSTM over the sequence from zero states; returns hidden states."""
    x, squeeze = _batched(x, 3)
    B, L, D = x.shape
    if D != params.in_dim:
        raise ShapeError(f"lstm_layer expects input dim {params.in_dim}, got {D}")
    m = _mask_array(mask, B, L)
    H, dt = params.hidden, x.dtype
    if fused:
        W = T.concat([params.W_i, params.W_f, params.W_o, params.W_c], axis=0)
        b = _bias_or_zeros([params.b_i, params.b_f, params.b_o, params.b_c], 4 * H, dt)
        out = _fused_lstm(x, W, b, m, reverse)
    else:
        h = T.Tensor(np.zeros((B, H), dtype=dt), dtype=dt)
        c = h
        steps = range(L - 1, -1, -1) if reverse else range(L)
        outs = [None] * L
        for t in steps:
            mt = T.Tensor(np.repeat(m[:, t, None], H, axis=1).astype(dt), dtype=dt)
            hn, cn = lstm_cell(T.take(x, t, 1), h, c, params)
            h, c = _carry(hn, h, mt), _carry(cn, c, mt)
            outs[t] = h
        out = T.stack(outs, axis=1)
    return _unbatch(out, squeeze)


def bilstm_layer(x: Tensor, fwd: LstmParams, bwd: LstmParams, mask=None, fused=True) -> Tensor:
    """Forward and backward LSTMs concatenated per position: ``[h_fwd; h_bwd]``."""
    if fwd.hidden != bwd.hidden or fwd.in_dim != bwd.in_dim:
        raise ShapeError("forward and backward LSTM parameters differ in shape")
    hf = lstm_layer(x, fwd, mask, reverse=False, fused=fused)
    hb = lstm_layer(x, bwd, mask, reverse=True, fused=fused)
    return T.concat([hf, hb], axis=-1)


def _fused_gru(x, Wrz, Wh, brz, bh, mask, reverse):
    k = kernels.backend
    X = np.ascontiguousarray(x.data)
    m8 = np.ascontiguousarray(mask, dtype=np.uint8)
    A, B_, b1, b2 = (np.ascontiguousarray(t.data) for t in (Wrz, Wh, brz, bh))
    Hs, cache = k.gru_forward(X, A, B_, b1, b2, m8, reverse)

    def bw(g):
        dX, dWrz, dWh, dbrz, dbh = k.gru_backward(np.ascontiguousarray(g), X, A, B_, m8, reverse, cache)
        return dX, dWrz, dWh, dbrz, dbh

    return T.custom_op(Hs, (x, Wrz, Wh, brz, bh), bw)


def _fused_lstm(x, W, b, mask, reverse):
    k = kernels.backend
    X = np.ascontiguousarray(x.data)
    m8 = np.ascontiguousarray(mask, dtype=np.uint8)
    Wd, bd = np.ascontiguousarray(W.data), np.ascontiguousarray(b.data)
    Hs, cache = k.lstm_forward(X, Wd, bd, m8, reverse)

    def bw(g):
        return k.lstm_backward(np.ascontiguousarray(g), X, Wd, m8, reverse, cache)

    return T.custom_op(Hs, (x, W, b), bw)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None, return_weights=False):
    """softmax(Q K^T / sqrt(d_k)) V with pad keys excluded from the softmax.

    ``mask`` marks real (True) key positions, shape (L,) or (B, L).
    """
    Q, squeeze = _batched(Q, 3)
    K, _ = _batched(K, 3)
    V, _ = _batched(V, 3)
    if Q.shape[2] != K.shape[2] or K.shape[:2] != V.shape[:2] or Q.shape[0] != K.shape[0]:
        raise ShapeError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    B, Lq, dk = Q.shape
    Lk = K.shape[1]
    keep = np.broadcast_to(_mask_array(mask, B, Lk)[:, None, :], (B, Lq, Lk))
    scores = T.scale(T.bmm(Q, T.transpose(K)), 1.0 / math.sqrt(dk))
    weights = T.masked_softmax(scores, keep, axis=2)
    out = _unbatch(T.bmm(weights, V), squeeze)
    if return_weights:
        return out, _unbatch(weights, squeeze)
    return out


def multi_head_attention(X: Tensor, params: MhaParams, mask=None) -> Tensor:
    """Per-head projections and attention, heads concatenated then projected by W_O."""
    X, squeeze = _batched(X, 3)
    if X.shape[2] != params.model_dim:
        raise ConfigError(f"attention expects model dim {params.model_dim}, got {X.shape[2]}")
    heads = []
    for i in range(params.heads):
        q = T.linear(X, params.W_Q[i])
        k = T.linear(X, params.W_K[i])
        v = T.linear(X, params.W_V[i])
        heads.append(scaled_dot_attention(q, k, v, mask))
    out = T.linear(T.concat(heads, axis=2), params.W_O)
    return _unbatch(out, squeeze)
