"""Decoder-only transformer stack with relative positional attention.

The stack is mechanism-agnostic: memory tokens and cached states are just
extra rows in the input / key-value tensors, controlled by the attention
mask.  All functions are pure in (weights, inputs, rng seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mechanisms
from .tensor import (ContractError, DimensionError, DropoutRng, Tensor, add,
                     broadcast_to, concat, dropout, embedding_lookup,
                     layer_norm, masked_fill, matmul, relu, reshape, scale,
                     slice_axis, softmax, take_last_axis, transpose)

NEG_INF = -1e30


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    dropout: float = 0.0
    segment_length: int = 1
    memory_size: int = 0
    mechanism: str = "baseline"
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"n_heads {self.n_heads}")
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if self.memory_size < 0:
            raise ValueError("memory_size must be >= 0")
        if self.mechanism not in mechanisms.MECHANISM_KINDS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# -- masks -----------------------------------------------------------------


def build_causal_mask(length: int) -> np.ndarray:
    """Boolean (L, L) mask; query i may attend keys j <= i."""
    if length < 1:
        raise ContractError("build_causal_mask: length must be >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


def build_rmt_mask(m: int, L: int) -> np.ndarray:
    """Mask for the [read m | sequence L | write m] layout.

    Memory blocks are internally unrestricted; the causal constraint
    applies to sequence tokens only.  Read rows see just the read block
    (memory is an input carrier, not a lookahead channel); sequence rows
    see the full read block plus their causal past; write rows see
    everything.
    """
    if m < 0 or L < 1:
        raise ContractError("build_rmt_mask: need m >= 0 and L >= 1")
    total = 2 * m + L
    mask = np.zeros((total, total), dtype=bool)
    mask[:m, :m] = True
    mask[m:m + L, :m] = True
    mask[m:m + L, m:m + L] = build_causal_mask(L)
    mask[m + L:, :] = True
    return mask


def build_cache_extended_mask(m_cache: int, L: int) -> np.ndarray:
    """(L, m_cache + L) mask: all cache keys allowed, causal afterwards."""
    if m_cache < 0 or L < 1:
        raise ContractError("build_cache_extended_mask: need m_cache >= 0 and L >= 1")
    mask = np.zeros((L, m_cache + L), dtype=bool)
    mask[:, :m_cache] = True
    mask[:, m_cache:] = build_causal_mask(L)
    return mask


def extend_mask_with_cache(mask: np.ndarray, cache_len: int) -> np.ndarray:
    """Prefix ``cache_len`` always-allowed key columns to an existing mask."""
    if cache_len == 0:
        return mask
    pad = np.ones((mask.shape[0], cache_len), dtype=bool)
    return np.hstack([pad, mask])


# -- relative positions ------------------------------------------------------


@dataclass
class RelPosParams:
    """Sinusoidal relative-distance table plus learned projection/biases.

    The table row for index r encodes distance ``r + dist_min``; with a
    cache of C keys in front of L_q queries, distances span
    [-(L_q - 1), L_k - 1].
    """

    table: Tensor
    w_r: Tensor
    u: Tensor
    v: Tensor
    dist_min: int


def sinusoid_table(dist_min: int, dist_max: int, d_model: int,
                   dtype=np.float64) -> np.ndarray:
    dists = np.arange(dist_min, dist_max + 1, dtype=dtype)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d_model, 2, dtype=dtype) / d_model))
    ang = dists[:, None] * inv_freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def make_rel_pos(params: dict, layer: int, L_q: int, L_k: int,
                 cfg: ModelConfig) -> RelPosParams:
    dist_min = -(L_q - 1)
    table = Tensor(sinusoid_table(dist_min, L_k - 1, cfg.d_model, cfg.np_dtype))
    return RelPosParams(table=table, w_r=params[f"layers.{layer}.attn.wr"],
                        u=params["rel.u"], v=params["rel.v"], dist_min=dist_min)


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, t, _ = x.shape
    return transpose(reshape(x, (b, t, n_heads, d_head)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def rel_attention(h_q: Tensor, h_kv: Tensor, mask: np.ndarray,
                  rel: RelPosParams, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                  w_o: Tensor, cfg: ModelConfig, rng: DropoutRng | None = None,
                  training: bool = False):
    """Multi-head attention with content and relative-position score terms.

    Per head: score(i, j) = (q_i + u)' k_j + (q_i + v)' (W_r r_{i-j}),
    scaled by 1/sqrt(d_head); disallowed positions are filled with -inf
    before the softmax.  Returns (output, attention weights).
    """
    L_q, L_k = h_q.shape[1], h_kv.shape[1]
    if mask.shape != (L_q, L_k):
        raise DimensionError(f"rel_attention: mask shape {mask.shape} does "
                             f"not match ({L_q}, {L_k})")
    H, dh = cfg.n_heads, cfg.d_head

    q = _split_heads(matmul(h_q, w_q), H, dh)          # (B, H, Lq, dh)
    k = _split_heads(matmul(h_kv, w_k), H, dh)
    v = _split_heads(matmul(h_kv, w_v), H, dh)

    u_b = reshape(rel.u, (1, H, 1, dh))
    v_b = reshape(rel.v, (1, H, 1, dh))

    content = matmul(add(q, u_b), transpose(k, (0, 1, 3, 2)))   # (B,H,Lq,Lk)

    # per-distance scores, gathered to per-key positions
    rproj = transpose(reshape(matmul(rel.table, rel.w_r),
                              (rel.table.shape[0], H, dh)), (1, 2, 0))  # (H,dh,ndist)
    bd = matmul(add(q, v_b), rproj)                              # (B,H,Lq,ndist)
    offset = L_k - L_q
    i = np.arange(L_q)[:, None]
    j = np.arange(L_k)[None, :]
    idx = i + offset - j - rel.dist_min
    pos = take_last_axis(bd, idx)

    scores = scale(add(content, pos), 1.0 / math.sqrt(dh))
    scores = masked_fill(scores, ~mask[None, None], NEG_INF)
    attn = softmax(scores, axis=-1)
    attn_d = dropout(attn, cfg.dropout, training, rng) if rng is not None else attn
    ctx = _merge_heads(matmul(attn_d, v))
    return matmul(ctx, w_o), attn


def transformer_layer(params: dict, layer: int, h_in: Tensor,
                      cache_entry: Tensor | None, mask: np.ndarray,
                      cfg: ModelConfig, rng: DropoutRng | None = None,
                      training: bool = False):
    """Pre-norm residual block: attention over (cache + current), then FFN."""
    p = f"layers.{layer}"
    ln1_g, ln1_b = params[f"{p}.ln1.g"], params[f"{p}.ln1.b"]
    h_q = layer_norm(h_in, ln1_g, ln1_b)
    if cache_entry is not None and cache_entry.shape[1] > 0:
        h_kv = layer_norm(concat([cache_entry, h_in], axis=1), ln1_g, ln1_b)
    else:
        h_kv = h_q
    rel = make_rel_pos(params, layer, h_q.shape[1], h_kv.shape[1], cfg)
    a, attn = rel_attention(h_q, h_kv, mask, rel,
                            params[f"{p}.attn.wq"], params[f"{p}.attn.wk"],
                            params[f"{p}.attn.wv"], params[f"{p}.attn.wo"],
                            cfg, rng, training)
    h = add(h_in, dropout(a, cfg.dropout, training, rng) if rng is not None else a)

    h2 = layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    f = add(matmul(relu(add(matmul(h2, params[f"{p}.ffn.w1"]),
                            params[f"{p}.ffn.b1"])),
                   params[f"{p}.ffn.w2"]),
            params[f"{p}.ffn.b2"])
    out = add(h, dropout(f, cfg.dropout, training, rng) if rng is not None else f)
    return out, attn


# -- full stack --------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh parameter dict: normal(0, 0.02) projections, zero biases."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    std = 0.02

    def w(*shape):
        return Tensor(rng.normal(0.0, std, shape).astype(dt), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    d, dff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    params = {
        "embed.weight": w(V, d),
        "rel.u": w(cfg.n_heads, cfg.d_head),
        "rel.v": w(cfg.n_heads, cfg.d_head),
        "ln_f.g": ones(d),
        "ln_f.b": zeros(d),
        "head.weight": w(d, V),
        "head.bias": zeros(V),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        params[f"{p}.attn.wq"] = w(d, d)
        params[f"{p}.attn.wk"] = w(d, d)
        params[f"{p}.attn.wv"] = w(d, d)
        params[f"{p}.attn.wo"] = w(d, d)
        params[f"{p}.attn.wr"] = w(d, d)
        params[f"{p}.ln1.g"] = ones(d)
        params[f"{p}.ln1.b"] = zeros(d)
        params[f"{p}.ln2.g"] = ones(d)
        params[f"{p}.ln2.b"] = zeros(d)
        params[f"{p}.ffn.w1"] = w(d, dff)
        params[f"{p}.ffn.b1"] = zeros(dff)
        params[f"{p}.ffn.w2"] = w(dff, d)
        params[f"{p}.ffn.b2"] = zeros(d)
    if cfg.memory_size > 0 and cfg.mechanism in ("mt", "rmt", "trxl_rmt"):
        params["memory.tokens"] = mechanisms.init_memory(
            cfg.memory_size, d, rng, dtype=dt)
    return params


@dataclass
class ForwardResult:
    logits: Tensor                      # (B, L, vocab) over sequence positions
    h_seq: Tensor                       # final hidden states, sequence slice
    read_out: Tensor | None
    write_out: Tensor | None
    layer_inputs: list                  # per-layer inputs, sequence slice only
    attn: list = field(default_factory=list)   # per-layer (B, H, Tq, Tk) weights
    layout: dict = field(default_factory=dict)


def forward_stack(params: dict, token_ids: np.ndarray,
                  mem_in: Tensor | None, cache_in, cfg: ModelConfig, *,
                  rng: DropoutRng | None = None, training: bool = False,
                  collect_attn: bool = False) -> ForwardResult:
    """Run the stack over one segment with the configured mechanism layout."""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    if token_ids.size and token_ids.max() >= cfg.vocab_size:
        raise ContractError(f"token id {int(token_ids.max())} >= vocab_size "
                            f"{cfg.vocab_size}")
    B, L = token_ids.shape
    m = cfg.memory_size
    mech = cfg.mechanism

    emb = embedding_lookup(params["embed.weight"], token_ids)
    if rng is not None:
        emb = dropout(emb, cfg.dropout, training, rng)

    if mech in ("rmt", "trxl_rmt") and m > 0:
        if mem_in is None:
            raise ContractError("forward_stack: RMT mechanism needs mem_in")
        mem_b = mem_in if mem_in.data.ndim == 3 else broadcast_to(
            reshape(mem_in, (1, m, cfg.d_model)), (B, m, cfg.d_model))
        x = mechanisms.augment_segment(mem_b, emb)
        mask = build_rmt_mask(m, L)
        lm_lo = m
    elif mech == "mt" and m > 0:
        if mem_in is None:
            raise ContractError("forward_stack: MT mechanism needs mem_in")
        mem_b = mem_in if mem_in.data.ndim == 3 else broadcast_to(
            reshape(mem_in, (1, m, cfg.d_model)), (B, m, cfg.d_model))
        x = mechanisms.mt_augment(mem_b, emb)
        mask = build_causal_mask(m + L)
        lm_lo = m
    else:
        x = emb
        mask = build_causal_mask(L)
        lm_lo = 0
    lm_hi = lm_lo + L
    total = x.shape[1]

    cache_width = cache_in.width if cache_in is not None else 0
    full_mask = extend_mask_with_cache(mask, cache_width)

    layer_inputs = []
    attn_maps = []
    for i in range(cfg.n_layers):
        layer_inputs.append(slice_axis(x, 1, lm_lo, lm_hi))
        entry = cache_in.entries[i] if cache_width else None
        x, attn = transformer_layer(params, i, x, entry, full_mask, cfg,
                                    rng, training)
        if collect_attn:
            attn_maps.append(attn.data)

    h_seq = slice_axis(x, 1, lm_lo, lm_hi)
    logits = add(matmul(layer_norm(h_seq, params["ln_f.g"], params["ln_f.b"]),
                        params["head.weight"]),
                 params["head.bias"])

    read_out = write_out = None
    if mech in ("rmt", "trxl_rmt") and m > 0:
        read_out, _, write_out = mechanisms.split_outputs(x, m, L)

    layout = {"cache": cache_width, "read": m if lm_lo else 0,
              "sequence": L,
              "write": m if mech in ("rmt", "trxl_rmt") and m > 0 else 0,
              "mt_prefix": m if mech == "mt" and m > 0 else 0,
              "total_keys": cache_width + total}
    return ForwardResult(logits=logits, h_seq=h_seq, read_out=read_out,
                         write_out=write_out, layer_inputs=layer_inputs,
                         attn=attn_maps, layout=layout)
