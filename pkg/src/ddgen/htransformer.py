"""Hybrid sequence generator: Transformer encoder/decoder with low-rank
projected attention, aggregated with a BiLSTM branch.

The encoder sees the L-step history after a series decomposition that
appends each step's deviation from the window mean. The decoder input is
the same decomposition, padded with mean/variance placeholder rows when the
generation window P exceeds L (or restricted to the last P steps when
P < L). Attention compresses keys and values to rank B along the sequence
axis with learned projections, so the context matrix holds L x B entries
per head instead of L x L. The decoder output is summed with a projected
BiLSTM pass over the decoder input, and a final affine head emits the
P-step feature sequence in one shot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adtensor import (Tensor, add, concat, const, layer_norm, matmul,
                       mean_axis, mul, narrow, relu, repeat, scale, sigmoid,
                       softmax, square, sub, tanh, tensor, transpose_last)

NEG_MASK = -1.0e30


@dataclass
class ModelConfig:
    feature_dim: int
    lag: int
    window: int
    d_model: int = 512
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 512
    rank: int = 64
    bilstm_hidden: int = 128
    bilstm_layers: int = 2
    dropout: float = 0.1

    def validate(self):
        if self.feature_dim < 1 or self.lag < 1 or self.window < 1:
            raise ValueError("feature_dim, lag and window must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model (%d) must be divisible by heads (%d)"
                             % (self.d_model, self.heads))
        if not (1 <= self.rank <= self.lag):
            raise ValueError("rank must satisfy 1 <= B <= lag")
        if min(self.enc_layers, self.dec_layers, self.bilstm_layers) < 1:
            raise ValueError("stacks need at least one layer")
        return self

    @property
    def d_k(self):
        return self.d_model // self.heads

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__}).validate()


class AttentionInstrumentation:
    """Counts stored context-matrix entries across projected attention calls."""

    def __init__(self, keep_matrices=False):
        self.context_entries = 0
        self.matrices = [] if keep_matrices else None

    def record(self, attn):
        self.context_entries += attn.data.size
        if self.matrices is not None:
            self.matrices.append(attn.data)


# ---------------------------------------------------------------------------
# parameter construction

def attention_params(params, prefix, d_model, heads, rank, kv_len, rng):
    """Append the learned matrices for one projected attention site."""
    lim = 1.0 / math.sqrt(d_model)
    for w in ("wq", "wk", "wv", "wo"):
        params["%s.%s" % (prefix, w)] = tensor(
            rng.uniform(-lim, lim, (d_model, d_model)))
    r = min(rank, kv_len)
    lim_p = 1.0 / math.sqrt(kv_len)
    for i in range(heads):
        params["%s.e%d" % (prefix, i)] = tensor(
            rng.uniform(-lim_p, lim_p, (r, kv_len)))
        params["%s.f%d" % (prefix, i)] = tensor(
            rng.uniform(-lim_p, lim_p, (r, kv_len)))


def _affine(params, name, fan_in, fan_out, rng):
    lim = 1.0 / math.sqrt(fan_in)
    params[name + ".w"] = tensor(rng.uniform(-lim, lim, (fan_in, fan_out)))
    params[name + ".b"] = tensor(np.zeros((1, 1, fan_out)))


def _layernorm_params(params, name, d_model):
    params[name + ".g"] = tensor(np.ones((1, 1, d_model)))
    params[name + ".b"] = tensor(np.zeros((1, 1, d_model)))


def _ffn_params(params, prefix, d_model, ffn_dim, rng):
    _affine(params, prefix + ".ffn1", d_model, ffn_dim, rng)
    _affine(params, prefix + ".ffn2", ffn_dim, d_model, rng)


def _lstm_params(params, prefix, d_in, hidden, rng):
    lim_x = 1.0 / math.sqrt(d_in)
    lim_h = 1.0 / math.sqrt(hidden)
    params[prefix + ".wx"] = tensor(rng.uniform(-lim_x, lim_x, (d_in, 4 * hidden)))
    params[prefix + ".wh"] = tensor(rng.uniform(-lim_h, lim_h, (hidden, 4 * hidden)))
    bias = np.zeros((1, 1, 4 * hidden))
    bias[..., hidden:2 * hidden] = 1.0  # forget gate opens at init
    params[prefix + ".b"] = tensor(bias)


def init_params(cfg, seed=0):
    """All learned tensors, keyed by a stable dotted name."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    f2 = 2 * cfg.feature_dim
    _affine(params, "enc.proj", f2, cfg.d_model, rng)
    for i in range(cfg.enc_layers):
        attention_params(params, "enc.%d.attn" % i, cfg.d_model, cfg.heads,
                         cfg.rank, cfg.lag, rng)
        _layernorm_params(params, "enc.%d.ln1" % i, cfg.d_model)
        _ffn_params(params, "enc.%d" % i, cfg.d_model, cfg.ffn_dim, rng)
        _layernorm_params(params, "enc.%d.ln2" % i, cfg.d_model)
    _affine(params, "dec.proj", f2, cfg.d_model, rng)
    dec_len = cfg.window
    for i in range(cfg.dec_layers):
        attention_params(params, "dec.%d.self" % i, cfg.d_model, cfg.heads,
                         cfg.rank, dec_len, rng)
        _layernorm_params(params, "dec.%d.ln1" % i, cfg.d_model)
        attention_params(params, "dec.%d.cross" % i, cfg.d_model, cfg.heads,
                         cfg.rank, cfg.lag, rng)
        _layernorm_params(params, "dec.%d.ln2" % i, cfg.d_model)
        _ffn_params(params, "dec.%d" % i, cfg.d_model, cfg.ffn_dim, rng)
        _layernorm_params(params, "dec.%d.ln3" % i, cfg.d_model)
    d_in = f2
    for i in range(cfg.bilstm_layers):
        _lstm_params(params, "lstm.%d.fw" % i, d_in, cfg.bilstm_hidden, rng)
        _lstm_params(params, "lstm.%d.bw" % i, d_in, cfg.bilstm_hidden, rng)
        d_in = 2 * cfg.bilstm_hidden
    _affine(params, "lstm.proj", 2 * cfg.bilstm_hidden, cfg.d_model, rng)
    _affine(params, "head", cfg.d_model, cfg.feature_dim, rng)
    return params


def param_count(params):
    return sum(t.data.size for t in params.values())


def model_summary(cfg, params):
    lines = ["hybrid transformer: d_model=%d heads=%d rank=%d lag=%d window=%d"
             % (cfg.d_model, cfg.heads, cfg.rank, cfg.lag, cfg.window)]
    for name, t in params.items():
        lines.append("  %-22s %-14s %7d" % (name, "x".join(map(str, t.shape)),
                                            t.data.size))
    lines.append("total parameters: %d" % param_count(params))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# building blocks

def sdb_encode(x):
    """Append each row's deviation from the sequence mean: (b,L,F) -> (b,L,2F)."""
    mean = mean_axis(x, 1, keepdims=True)
    return concat([x, sub(x, mean)], axis=-1)


def sdb_decode(x, window):
    """Decoder-side decomposition of the L-step history for a P-step window.

    P >= L: every history row with its deviation, then P-L identical
    placeholder rows carrying the history mean and elementwise variance.
    P < L: the last P rows decomposed against their own mean.
    """
    lag = x.data.shape[1]
    if window < lag:
        tail = narrow(x, 1, lag - window, window)
        mean = mean_axis(tail, 1, keepdims=True)
        return concat([tail, sub(tail, mean)], axis=-1)
    mean = mean_axis(x, 1, keepdims=True)
    dev = sub(x, mean)
    rows = concat([x, dev], axis=-1)
    if window == lag:
        return rows
    var = mean_axis(square(dev), 1, keepdims=True)
    placeholder = concat([mean, var], axis=-1)
    return concat([rows, repeat(placeholder, window - lag, axis=1)], axis=1)


_PE_CACHE = {}


def positional_encoding(length, d_model):
    """Sinusoidal position table, shaped (1, length, d_model) for adding."""
    if d_model % 2 != 0:
        raise ValueError("positional encoding needs an even width")
    key = (length, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(length, dtype=np.float64)[:, None]
        idx = np.arange(0, d_model, 2, dtype=np.float64)
        freq = 1.0 / np.power(10000.0, idx / d_model)
        pe = np.zeros((length, d_model))
        pe[:, 0::2] = np.sin(pos * freq)
        pe[:, 1::2] = np.cos(pos * freq)
        pe = pe[None, :, :]
        pe.setflags(write=False)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _causal_mask(n_rows, n_cols):
    mask = np.zeros((1, n_rows, n_cols))
    cols = np.arange(n_cols)[None, :]
    rows = np.arange(n_rows)[:, None]
    mask[0][cols > rows] = NEG_MASK
    return mask


def projected_mha(x_q, x_kv, params, prefix, heads, d_model,
                  causal=False, instr=None):
    """Multi-head attention with rank-B compressed keys and values.

    Keys/values are projected along the sequence axis by the learned E/F
    matrices of this site, so each head's context matrix is (Lq x B). The
    causal mask zeroes logits above the diagonal of the compressed slot
    index; with identity E/F this reduces to ordinary masked attention.
    """
    d_k = d_model // heads
    l_kv = x_kv.data.shape[1]
    inv = 1.0 / math.sqrt(d_model)
    wq, wk, wv = (params[prefix + s] for s in (".wq", ".wk", ".wv"))
    mask = None
    heads_out = []
    for i in range(heads):
        proj_e = params["%s.e%d" % (prefix, i)]
        proj_f = params["%s.f%d" % (prefix, i)]
        if proj_e.data.shape[0] > l_kv:
            raise ValueError("projection rank %d exceeds sequence length %d"
                             % (proj_e.data.shape[0], l_kv))
        q = matmul(x_q, narrow(wq, 1, i * d_k, d_k))
        k = matmul(x_kv, narrow(wk, 1, i * d_k, d_k))
        v = matmul(x_kv, narrow(wv, 1, i * d_k, d_k))
        k_low = matmul(proj_e, k)          # (b, B, d_k)
        v_low = matmul(proj_f, v)
        logits = scale(matmul(q, transpose_last(k_low)), inv)
        if causal:
            if mask is None:
                mask = const(_causal_mask(x_q.data.shape[1], proj_e.data.shape[0]))
            logits = add(logits, mask)
        attn = softmax(logits)             # the stored context matrix
        if instr is not None:
            instr.record(attn)
        heads_out.append(matmul(attn, v_low))
    return matmul(concat(heads_out, axis=-1), params[prefix + ".wo"])


def _dropout(t, p, training, rng):
    if not training or p <= 0.0 or rng is None:
        return t
    mask = (rng.random(t.data.shape) >= p) / (1.0 - p)
    return mul(t, const(mask))


def _ffn(x, params, prefix):
    hidden = relu(add(matmul(x, params[prefix + ".ffn1.w"]),
                      params[prefix + ".ffn1.b"]))
    return add(matmul(hidden, params[prefix + ".ffn2.w"]),
               params[prefix + ".ffn2.b"])


def _encoder_layer(x, params, prefix, cfg, training, rng, instr):
    a = projected_mha(x, x, params, prefix + ".attn", cfg.heads, cfg.d_model,
                      instr=instr)
    x = layer_norm(add(x, _dropout(a, cfg.dropout, training, rng)),
                   params[prefix + ".ln1.g"], params[prefix + ".ln1.b"])
    f = _ffn(x, params, prefix)
    return layer_norm(add(x, _dropout(f, cfg.dropout, training, rng)),
                      params[prefix + ".ln2.g"], params[prefix + ".ln2.b"])


def _decoder_layer(x, memory, params, prefix, cfg, training, rng, instr):
    a = projected_mha(x, x, params, prefix + ".self", cfg.heads, cfg.d_model,
                      causal=True, instr=instr)
    x = layer_norm(add(x, _dropout(a, cfg.dropout, training, rng)),
                   params[prefix + ".ln1.g"], params[prefix + ".ln1.b"])
    c = projected_mha(x, memory, params, prefix + ".cross", cfg.heads,
                      cfg.d_model, instr=instr)
    x = layer_norm(add(x, _dropout(c, cfg.dropout, training, rng)),
                   params[prefix + ".ln2.g"], params[prefix + ".ln2.b"])
    f = _ffn(x, params, prefix)
    return layer_norm(add(x, _dropout(f, cfg.dropout, training, rng)),
                      params[prefix + ".ln3.g"], params[prefix + ".ln3.b"])


def _lstm_pass(x, params, prefix, hidden, reverse=False):
    """One LSTM direction over (b,T,d_in); returns the (b,T,hidden) outputs."""
    b, t_len, _ = x.data.shape
    wx, wh, bias = (params[prefix + s] for s in (".wx", ".wh", ".b"))
    xw = add(matmul(x, wx), bias)  # input contribution for every step at once
    h = const(np.zeros((b, 1, hidden)))
    c = const(np.zeros((b, 1, hidden)))
    outs = []
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        gates = add(narrow(xw, 1, t, 1), matmul(h, wh))
        i_g = sigmoid(narrow(gates, 2, 0, hidden))
        f_g = sigmoid(narrow(gates, 2, hidden, hidden))
        g_g = tanh(narrow(gates, 2, 2 * hidden, hidden))
        o_g = sigmoid(narrow(gates, 2, 3 * hidden, hidden))
        c = add(mul(f_g, c), mul(i_g, g_g))
        h = mul(o_g, tanh(c))
        outs.append(h)
    if reverse:
        outs.reverse()
    return concat(outs, axis=1) if len(outs) > 1 else outs[0]


def bilstm_forward(x, params, prefix, hidden, layers=1):
    """Stacked bidirectional LSTM: (b,T,d_in) -> (b,T,2*hidden)."""
    out = x
    for i in range(layers):
        fw = _lstm_pass(out, params, "%s.%d.fw" % (prefix, i), hidden)
        bw = _lstm_pass(out, params, "%s.%d.bw" % (prefix, i), hidden,
                        reverse=True)
        out = concat([fw, bw], axis=-1)
    return out


def _as_batch(history):
    if isinstance(history, Tensor):
        if history.data.ndim != 3:
            raise ValueError("history tensor must be (batch, lag, features)")
        return history
    arr = np.asarray(history, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    return const(arr)


def hybrid_forward(history, cfg, params, training=False, dropout_rng=None,
                   instr=None):
    """Generate the P-step feature sequence from an L-step scaled history.

    Returns a (batch, P, feature_dim) tensor; 2-D input is treated as a
    single-example batch.
    """
    x = _as_batch(history)
    if x.data.shape[1] != cfg.lag or x.data.shape[2] != cfg.feature_dim:
        raise ValueError("history shape %s does not match lag=%d feature_dim=%d"
                         % (x.data.shape, cfg.lag, cfg.feature_dim))
    enc_in = sdb_encode(x)
    enc = add(matmul(enc_in, params["enc.proj.w"]), params["enc.proj.b"])
    enc = add(enc, const(positional_encoding(cfg.lag, cfg.d_model)))
    for i in range(cfg.enc_layers):
        enc = _encoder_layer(enc, params, "enc.%d" % i, cfg, training,
                             dropout_rng, instr)
    dec_in = sdb_decode(x, cfg.window)
    dec = add(matmul(dec_in, params["dec.proj.w"]), params["dec.proj.b"])
    dec = add(dec, const(positional_encoding(cfg.window, cfg.d_model)))
    for i in range(cfg.dec_layers):
        dec = _decoder_layer(dec, enc, params, "dec.%d" % i, cfg, training,
                             dropout_rng, instr)
    lstm = bilstm_forward(dec_in, params, "lstm", cfg.bilstm_hidden,
                          cfg.bilstm_layers)
    branch = add(matmul(lstm, params["lstm.proj.w"]), params["lstm.proj.b"])
    agg = add(dec, branch)
    return add(matmul(agg, params["head.w"]), params["head.b"])
