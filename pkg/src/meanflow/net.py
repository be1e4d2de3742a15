"""Flow transformer predicting average velocity from (x_t, r, t, condition).

The backbone mixes joint-attention blocks (a data stream attending together
with learned per-label pseudo-tokens) with data-only blocks. Conditioning
enters twice: pseudo-tokens through joint attention, and a global vector
c = t_emb + r_emb + label_emb through the scale/shift/gate of adaptive layer
norm. Attention uses RMS-normalized queries/keys with rotary positions; the
data-stream MLPs are 1-D convolutions over the token axis (kernel 3, pad 1).

All modulation projections and the output head start at zero, so a freshly
initialized network is the identity backbone followed by a zero readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor, value_of
from .rng import STREAM_INIT, derive_rng

MLP_EXPANSION = 4
CONV_KERNEL = 3
CONV_PADDING = 1
ROPE_BASE = 1.0e4
NORM_EPS = 1e-6


@dataclass(frozen=True)
class FlowNetConfig:
    latent_dim: int
    n_labels: int
    n_mm_blocks: int = 2
    n_sm_blocks: int = 4
    hidden_dim: int = 96
    n_heads: int = 4
    max_seq_len: int = 32
    pseudo_token_count: int = 4
    time_embed_dim: int = 64
    # top of the geometric frequency ladder for time features; finite-difference
    # oracles need a gentler ladder than trained models
    time_freq_max: float = 1.0e4

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_labels < 1:
            raise ValueError("latent_dim and n_labels must be positive")
        if self.n_mm_blocks < 1 or self.n_sm_blocks < 0:
            raise ValueError("need n_mm_blocks >= 1 and n_sm_blocks >= 0")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs features)")
        if self.pseudo_token_count < 1 or self.max_seq_len < 1:
            raise ValueError("pseudo_token_count and max_seq_len must be positive")
        if self.time_embed_dim < 2:
            raise ValueError("time_embed_dim must be at least 2")
        if self.time_freq_max <= 1.0:
            raise ValueError("time_freq_max must exceed 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def null_label(self) -> int:
        """Embedding-table row reserved for the dropped/unconditional case."""
        return self.n_labels


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _stream_names(cfg: FlowNetConfig):
    for i in range(cfg.n_mm_blocks):
        yield f"mm{i}.a", True
        yield f"mm{i}.x", False
    for i in range(cfg.n_sm_blocks):
        yield f"sm{i}.a", True


def init_params(cfg: FlowNetConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = derive_rng(seed, STREAM_INIT)
    h = cfg.hidden_dim
    params = ParamSet()

    def linear(name, fan_in, fan_out, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out))
        params.add(f"{name}.w", Tensor(w, dtype=dtype))
        params.add(f"{name}.b", Tensor(np.zeros(fan_out), dtype=dtype))

    def conv(name, c_in, c_out):
        w = rng.normal(0.0, (CONV_KERNEL * c_in) ** -0.5, size=(CONV_KERNEL, c_in, c_out))
        params.add(f"{name}.w", Tensor(w, dtype=dtype))
        params.add(f"{name}.b", Tensor(np.zeros(c_out), dtype=dtype))

    linear("in_proj", cfg.latent_dim, h)
    params.add(
        "cond.tokens",
        Tensor(rng.normal(0.0, 0.02, size=(cfg.n_labels + 1, cfg.pseudo_token_count, h)), dtype=dtype),
    )
    params.add(
        "cond.global",
        Tensor(rng.normal(0.0, 0.02, size=(cfg.n_labels + 1, h)), dtype=dtype),
    )
    for stream in ("time_t", "time_r"):
        linear(f"{stream}.l1", 2 * cfg.time_embed_dim, h)
        linear(f"{stream}.l2", h, h)

    for prefix, is_data in _stream_names(cfg):
        linear(f"{prefix}.mod", h, 6 * h, zero=True)
        for proj in ("q", "k", "v"):
            linear(f"{prefix}.{proj}", h, h)
        params.add(f"{prefix}.q_scale", Tensor(np.ones(cfg.head_dim), dtype=dtype))
        params.add(f"{prefix}.k_scale", Tensor(np.ones(cfg.head_dim), dtype=dtype))
        linear(f"{prefix}.attn_out", h, h)
        if is_data:
            conv(f"{prefix}.conv1", h, MLP_EXPANSION * h)
            conv(f"{prefix}.conv2", MLP_EXPANSION * h, h)
        else:
            linear(f"{prefix}.mlp1", h, MLP_EXPANSION * h)
            linear(f"{prefix}.mlp2", MLP_EXPANSION * h, h)

    linear("final.mod", h, 2 * h, zero=True)
    linear("final.out", h, cfg.latent_dim, zero=True)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _linear(params, name, x):
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def rms_norm(h, scale, eps=NORM_EPS):
    """h / rms(h) over the trailing axis, then elementwise learnable scale."""
    return ad.rms_normalize(h, eps=eps, axis=-1) * scale


def layer_norm(h, eps=NORM_EPS):
    """Zero-mean, unit-variance normalization over features (no affine)."""
    centered = h - ad.mean(h, axis=-1, keepdims=True)
    return ad.rms_normalize(centered, eps=eps, axis=-1)


def adaln_modulate(h, scale, shift, eps=NORM_EPS):
    """Normalize, then apply conditioning as (1 + scale) * h_norm + shift."""
    return layer_norm(h, eps=eps) * (scale + 1.0) + shift


def conv_mlp(params, prefix, h):
    """Two token-axis convolutions with a smooth gate between; length kept."""
    mid = ad.silu(ad.conv1d(h, params[f"{prefix}.conv1.w"], padding=CONV_PADDING) + params[f"{prefix}.conv1.b"])
    return ad.conv1d(mid, params[f"{prefix}.conv2.w"], padding=CONV_PADDING) + params[f"{prefix}.conv2.b"]


def rope_tables(positions, head_dim, dtype):
    """cos/sin lookup of shape [len(positions), head_dim], pairs repeated."""
    positions = np.asarray(positions, dtype=np.float64)
    n_pairs = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(n_pairs) / n_pairs)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=1).astype(dtype)
    return cos, sin


def _rotate_pairs(q):
    dh = value_of(q).shape[-1]
    perm = np.arange(dh) ^ 1  # swap each (even, odd) pair
    sign = np.where(np.arange(dh) % 2 == 0, -1.0, 1.0)
    return ad.take(q, perm, axis=-1) * sign


def rope_apply(q, k, positions):
    """Rotate query/key feature pairs by position-dependent angles."""
    dh = value_of(q).shape[-1]
    if dh % 2 != 0:
        raise ValueError("rotary embedding needs an even head_dim")
    cos, sin = rope_tables(positions, dh, value_of(q).dtype)
    q_out = q * cos + _rotate_pairs(q) * sin
    k_out = k * cos + _rotate_pairs(k) * sin
    return q_out, k_out


def timestep_embed(cfg: FlowNetConfig, params, s, stream="time_t"):
    """Geometric sin/cos features of a time in [0,1], mapped to hidden_dim."""
    s_val = value_of(s)
    if np.any(s_val < 0.0) or np.any(s_val > 1.0):
        raise ValueError("timestep must lie in [0, 1]")
    if not isinstance(s, (ad.Tensor, ad.DualTensor, ad.Node)):
        s = Tensor(np.atleast_1d(np.asarray(s, dtype=np.float64)))
    freqs = cfg.time_freq_max ** (np.arange(cfg.time_embed_dim) / max(cfg.time_embed_dim - 1, 1))
    ang = ad.reshape(s, (value_of(s).shape[0], 1)) * freqs
    feats = ad.concat([ad.sin(ang), ad.cos(ang)], axis=-1)
    return _linear(params, f"{stream}.l2", ad.silu(_linear(params, f"{stream}.l1", feats)))


def embed_condition(cfg: FlowNetConfig, params, label: int):
    """Pseudo-token sequence and global vector for one label (or the null row)."""
    if not (0 <= label <= cfg.null_label):
        raise ValueError(f"label {label} outside [0, {cfg.n_labels}] (null = {cfg.null_label})")
    idx = np.array([label])
    tokens = ad.reshape(
        ad.take(params["cond.tokens"], idx, axis=0),
        (cfg.pseudo_token_count, cfg.hidden_dim),
    )
    global_vec = ad.reshape(ad.take(params["cond.global"], idx, axis=0), (cfg.hidden_dim,))
    return tokens, global_vec


def global_condition(cfg: FlowNetConfig, params, r, t, labels):
    """c = t_emb + r_emb + per-label global embedding, shape [B, hidden]."""
    t_emb = timestep_embed(cfg, params, t, "time_t")
    r_emb = timestep_embed(cfg, params, r, "time_r")
    label_emb = ad.take(params["cond.global"], labels, axis=0)
    return t_emb + r_emb + label_emb


def _modulation(params, prefix, c_act, n_chunks):
    b = value_of(c_act).shape[0]
    h = value_of(c_act).shape[-1]
    m = _linear(params, f"{prefix}.mod", c_act)
    m = ad.reshape(m, (b, n_chunks, h))
    return [ad.take(m, np.array([i]), axis=1) for i in range(n_chunks)]  # each [B,1,H]


def _heads(cfg, x):
    b, l, _ = value_of(x).shape
    x = ad.reshape(x, (b, l, cfg.n_heads, cfg.head_dim))
    return ad.transpose(x, (0, 2, 1, 3))  # [B, nh, L, dh]


def _unheads(cfg, x):
    b, _, l, _ = value_of(x).shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, l, cfg.hidden_dim))


def _stream_qkv(cfg, params, prefix, h_norm, positions):
    q = _heads(cfg, _linear(params, f"{prefix}.q", h_norm))
    k = _heads(cfg, _linear(params, f"{prefix}.k", h_norm))
    v = _heads(cfg, _linear(params, f"{prefix}.v", h_norm))
    q = rms_norm(q, params[f"{prefix}.q_scale"])
    k = rms_norm(k, params[f"{prefix}.k_scale"])
    q, k = rope_apply(q, k, positions)
    return q, k, v


def _attention(cfg, q, k, v):
    scale = 1.0 / float(np.sqrt(cfg.head_dim))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _mm_block(cfg, params, i, h_data, h_text, c_act):
    pa, px = f"mm{i}.a", f"mm{i}.x"
    l = value_of(h_data).shape[1]
    m = cfg.pseudo_token_count
    mod_a = _modulation(params, pa, c_act, 6)
    mod_x = _modulation(params, px, c_act, 6)

    na = adaln_modulate(h_data, mod_a[1], mod_a[0])
    nx = adaln_modulate(h_text, mod_x[1], mod_x[0])
    qa, ka, va = _stream_qkv(cfg, params, pa, na, np.arange(l))
    qx, kx, vx = _stream_qkv(cfg, params, px, nx, np.arange(m))

    q = ad.concat([qx, qa], axis=2)
    k = ad.concat([kx, ka], axis=2)
    v = ad.concat([vx, va], axis=2)
    joint = _unheads(cfg, _attention(cfg, q, k, v))  # [B, M+L, H]
    out_x = ad.take(joint, np.arange(m), axis=1)
    out_a = ad.take(joint, np.arange(m, m + l), axis=1)

    h_data = h_data + mod_a[2] * _linear(params, f"{pa}.attn_out", out_a)
    h_text = h_text + mod_x[2] * _linear(params, f"{px}.attn_out", out_x)

    na = adaln_modulate(h_data, mod_a[4], mod_a[3])
    h_data = h_data + mod_a[5] * conv_mlp(params, pa, na)
    nx = adaln_modulate(h_text, mod_x[4], mod_x[3])
    mlp = _linear(params, f"{px}.mlp2", ad.silu(_linear(params, f"{px}.mlp1", nx)))
    h_text = h_text + mod_x[5] * mlp
    return h_data, h_text


def _sm_block(cfg, params, i, h_data, c_act):
    p = f"sm{i}.a"
    l = value_of(h_data).shape[1]
    mod = _modulation(params, p, c_act, 6)
    n = adaln_modulate(h_data, mod[1], mod[0])
    q, k, v = _stream_qkv(cfg, params, p, n, np.arange(l))
    attn = _unheads(cfg, _attention(cfg, q, k, v))
    h_data = h_data + mod[2] * _linear(params, f"{p}.attn_out", attn)
    n = adaln_modulate(h_data, mod[4], mod[3])
    return h_data + mod[5] * conv_mlp(params, p, n)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _validate_inputs(cfg, x, r, t, labels):
    xs = value_of(x).shape
    if len(xs) != 3 or xs[2] != cfg.latent_dim:
        raise ValueError(f"x must be [B, L, {cfg.latent_dim}], got {xs}")
    if xs[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {xs[1]} exceeds max_seq_len {cfg.max_seq_len}")
    rv, tv = value_of(r), value_of(t)
    if rv.shape != (xs[0],) or tv.shape != (xs[0],):
        raise ValueError("r and t must be [B] vectors matching the batch")
    if np.any(rv < 0) or np.any(tv > 1) or np.any(rv > tv):
        raise ValueError("times must satisfy 0 <= r <= t <= 1 elementwise")
    labels = np.asarray(labels)
    if labels.shape != (xs[0],) or labels.dtype.kind not in "iu":
        raise ValueError("labels must be an integer [B] array")
    if np.any(labels < 0) or np.any(labels > cfg.null_label):
        raise ValueError(f"labels must lie in [0, {cfg.null_label}] (null = {cfg.null_label})")
    return labels


def apply_flow_net(cfg: FlowNetConfig, params, x, r, t, labels):
    """Predict average velocity over [r, t] at state x; same shape as x.

    `labels` is a [B] integer array; the value cfg.null_label selects the
    learned unconditional row. Works with plain, dual (jvp), or taped
    parameters/inputs since it touches them only through registered ops.
    """
    labels = _validate_inputs(cfg, x, r, t, labels)
    c = global_condition(cfg, params, r, t, labels)
    c_act = ad.silu(c)

    h_data = _linear(params, "in_proj", x)
    h_text = ad.take(params["cond.tokens"], labels, axis=0)

    for i in range(cfg.n_mm_blocks):
        h_data, h_text = _mm_block(cfg, params, i, h_data, h_text, c_act)
    for i in range(cfg.n_sm_blocks):
        h_data = _sm_block(cfg, params, i, h_data, c_act)

    mod = _modulation(params, "final", c_act, 2)
    out = adaln_modulate(h_data, mod[1], mod[0])
    return _linear(params, "final.out", out)


class FlowNet:
    """Config + parameters bundle with a convenient call form."""

    def __init__(self, cfg: FlowNetConfig, seed: int = 0, dtype=np.float32, params=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    def __call__(self, x, r, t, labels, params=None):
        return apply_flow_net(self.cfg, params if params is not None else self.params, x, r, t, labels)
