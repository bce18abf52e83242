"""Encoder-decoder transformer with relative-position attention biases.

Pre-norm residual blocks, RMS normalization without bias, a shared
embedding table tied to the output projection, and learned per-head
relative-position biases with logarithmic distance bucketing. The encoder
bias is bidirectional, the decoder self-attention bias unidirectional;
cross-attention carries no positional bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bpe import PAD_ID
from .rng import SplitMix64, derive_seed
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_relative_buckets: int = 32
    max_relative_distance: int = 128
    dropout_rate: float = 0.0

    def __post_init__(self):
        counts = (self.vocab_size, self.d_model, self.n_heads, self.d_ff,
                  self.n_encoder_layers, self.n_decoder_layers)
        if any(c < 1 for c in counts):
            raise ValueError(f"all size fields must be >= 1: {self}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_relative_buckets < 2:
            raise ValueError(f"n_relative_buckets must be >= 2, got {self.n_relative_buckets}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def relative_bucket(distance: int, bidirectional: bool, n_buckets: int, max_distance: int) -> int:
    """Map a signed key-minus-query distance to a bucket id.

    Half the buckets (a quarter each side when bidirectional) hold exact
    small distances; the rest grow logarithmically and clamp at
    max_distance. Distance 0 is always bucket 0.
    """
    if n_buckets < 2:
        raise ValueError(f"n_buckets must be >= 2, got {n_buckets}")
    bucket = 0
    if bidirectional:
        n_buckets //= 2
        if distance > 0:
            bucket += n_buckets
        distance = abs(distance)
    else:
        distance = max(-distance, 0)
    max_exact = n_buckets // 2
    if distance < max_exact:
        return bucket + distance
    log_part = math.log(distance / max_exact) / math.log(max_distance / max_exact)
    large = max_exact + int(log_part * (n_buckets - max_exact))
    return bucket + min(large, n_buckets - 1)


def bucket_table(n_q: int, n_k: int, bidirectional: bool, n_buckets: int, max_distance: int) -> np.ndarray:
    """[n_q, n_k] bucket ids for distance = key_pos - query_pos."""
    q = np.arange(n_q)[:, None]
    k = np.arange(n_k)[None, :]
    dist = k - q
    flat = [relative_bucket(int(d), bidirectional, n_buckets, max_distance) for d in dist.reshape(-1)]
    return np.array(flat, dtype=np.int64).reshape(n_q, n_k)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic initialization: Normal(0, 1/sqrt(d_model)) projections
    and embeddings, unit RMS gains, zero relative-bias tables."""
    rng = np.random.default_rng(seed)
    std = cfg.d_model ** -0.5

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    p: dict[str, Tensor] = {}
    p["embedding"] = normal(cfg.vocab_size, cfg.d_model)
    p["enc_rel_bias"] = zeros(cfg.n_relative_buckets, cfg.n_heads)
    p["dec_rel_bias"] = zeros(cfg.n_relative_buckets, cfg.n_heads)
    for i in range(cfg.n_encoder_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"enc.{i}.attn.{w}"] = normal(cfg.d_model, cfg.d_model)
        p[f"enc.{i}.attn_norm.gain"] = ones(cfg.d_model)
        p[f"enc.{i}.ffn.w1"] = normal(cfg.d_model, cfg.d_ff)
        p[f"enc.{i}.ffn.w2"] = normal(cfg.d_ff, cfg.d_model)
        p[f"enc.{i}.ffn_norm.gain"] = ones(cfg.d_model)
    p["enc.final_norm.gain"] = ones(cfg.d_model)
    for i in range(cfg.n_decoder_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"dec.{i}.self.{w}"] = normal(cfg.d_model, cfg.d_model)
        p[f"dec.{i}.self_norm.gain"] = ones(cfg.d_model)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"dec.{i}.cross.{w}"] = normal(cfg.d_model, cfg.d_model)
        p[f"dec.{i}.cross_norm.gain"] = ones(cfg.d_model)
        p[f"dec.{i}.ffn.w1"] = normal(cfg.d_model, cfg.d_ff)
        p[f"dec.{i}.ffn.w2"] = normal(cfg.d_ff, cfg.d_model)
        p[f"dec.{i}.ffn_norm.gain"] = ones(cfg.d_model)
    p["dec.final_norm.gain"] = ones(cfg.d_model)
    return p


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + bias + mask penalty) v.

    `mask` is boolean, True where attention is permitted, broadcastable to
    the score shape. A query row with zero permitted keys is an error.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention head dims disagree: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention key/value counts disagree: k {k.shape} vs v {v.shape}")
    scores = T.mul(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), q.shape[-1] ** -0.5)
    if bias is not None:
        scores = T.add(scores, bias)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("attention row with zero unmasked keys")
        penalty = np.where(mask, 0.0, NEG_INF).astype(scores.data.dtype)
        scores = T.add(scores, penalty)
    return T.matmul(T.softmax(scores, -1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _join_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _mha(params, prefix: str, cfg: ModelConfig, x_q: Tensor, x_kv: Tensor,
         bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
    q = _split_heads(T.matmul(x_q, params[f"{prefix}.wq"]), cfg.n_heads)
    k = _split_heads(T.matmul(x_kv, params[f"{prefix}.wk"]), cfg.n_heads)
    v = _split_heads(T.matmul(x_kv, params[f"{prefix}.wv"]), cfg.n_heads)
    ctx = attention(q, k, v, bias=bias, mask=mask)
    return T.matmul(_join_heads(ctx), params[f"{prefix}.wo"])


def _rel_bias(table: Tensor, n_q: int, n_k: int, bidirectional: bool, cfg: ModelConfig) -> Tensor:
    buckets = bucket_table(n_q, n_k, bidirectional, cfg.n_relative_buckets, cfg.max_relative_distance)
    return T.transpose(T.embedding(table, buckets), (2, 0, 1))  # [heads, n_q, n_k]


class _Dropout:
    """Per-forward dropout seed stream; inactive when rate is zero."""

    def __init__(self, rate: float, seed: int | None):
        self.rate = rate if seed is not None else 0.0
        self._rng = SplitMix64(seed) if seed is not None else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate == 0.0:
            return x
        return T.dropout(x, self.rate, self._rng.next_u64())


def _check_ids(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError(f"token ids must be [batch, length], got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id outside vocabulary of size {vocab_size}")
    return ids


def encode_source(params: dict[str, Tensor], cfg: ModelConfig, src_ids,
                  src_mask: np.ndarray | None = None, dropout_seed: int | None = None) -> Tensor:
    """Run the encoder stack; returns memory of shape [batch, src_len, d_model].

    `src_mask` is True at real tokens; PAD keys are masked out of attention,
    so the padded tail cannot influence other positions.
    """
    src_ids = _check_ids(src_ids, cfg.vocab_size)
    b, s = src_ids.shape
    if src_mask is None:
        src_mask = src_ids != PAD_ID
    drop = _Dropout(cfg.dropout_rate, dropout_seed)
    key_mask = src_mask[:, None, None, :]  # [b, 1, 1, s]
    bias = _rel_bias(params["enc_rel_bias"], s, s, True, cfg)
    x = T.embedding(params["embedding"], src_ids)
    for i in range(cfg.n_encoder_layers):
        h = T.rms_norm(x, params[f"enc.{i}.attn_norm.gain"])
        x = T.add(x, drop(_mha(params, f"enc.{i}.attn", cfg, h, h, bias, key_mask)))
        h = T.rms_norm(x, params[f"enc.{i}.ffn_norm.gain"])
        h = T.matmul(T.relu(T.matmul(h, params[f"enc.{i}.ffn.w1"])), params[f"enc.{i}.ffn.w2"])
        x = T.add(x, drop(h))
    return T.rms_norm(x, params["enc.final_norm.gain"])


def decode_logits(params: dict[str, Tensor], cfg: ModelConfig, memory: Tensor, tgt_ids,
                  src_mask: np.ndarray | None = None, dropout_seed: int | None = None) -> Tensor:
    """Causal decoder over `memory`; returns logits [batch, tgt_len, vocab].

    Position t attends to decoder positions <= t and to all unmasked memory
    positions. The output projection is the transposed embedding table.
    """
    tgt_ids = _check_ids(tgt_ids, cfg.vocab_size)
    b, t = tgt_ids.shape
    drop = _Dropout(cfg.dropout_rate, dropout_seed)
    causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
    mem_mask = None if src_mask is None else src_mask[:, None, None, :]
    self_bias = _rel_bias(params["dec_rel_bias"], t, t, False, cfg)
    x = T.embedding(params["embedding"], tgt_ids)
    for i in range(cfg.n_decoder_layers):
        h = T.rms_norm(x, params[f"dec.{i}.self_norm.gain"])
        x = T.add(x, drop(_mha(params, f"dec.{i}.self", cfg, h, h, self_bias, causal)))
        h = T.rms_norm(x, params[f"dec.{i}.cross_norm.gain"])
        x = T.add(x, drop(_mha(params, f"dec.{i}.cross", cfg, h, memory, None, mem_mask)))
        h = T.rms_norm(x, params[f"dec.{i}.ffn_norm.gain"])
        h = T.matmul(T.relu(T.matmul(h, params[f"dec.{i}.ffn.w1"])), params[f"dec.{i}.ffn.w2"])
        x = T.add(x, drop(h))
    x = T.rms_norm(x, params["dec.final_norm.gain"])
    return T.matmul(x, T.transpose(params["embedding"], (1, 0)))


def forward_dropout_seed(seed: int, step: int) -> int:
    """Stable per-step dropout seed for training."""
    return derive_seed(seed, 0xD0, step)
