"""Bidirectional unmasking predictor: a small full-attention transformer.

Maps a (partially masked) token sequence to per-position vocabulary logits.
There is no causal mask anywhere; logits at position i may depend on tokens
at any position, which is what makes inpainting-style conditioning work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .errors import ConfigError, InputError
from .rngs import derive_rng

INIT_STD = 0.05


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 96
    mask_token_id: int = 1

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.num_layers, self.num_heads, self.max_seq_len) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ConfigError("mask token id must be < vocab_size")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def init_params(config: ModelConfig, seed: int) -> dict[str, Array]:
    """Scaled-normal weights, zero biases, unit layernorm gains; deterministic per seed."""
    rng = derive_rng("init", seed)
    d, v = config.embed_dim, config.vocab_size
    params: dict[str, Array] = {
        "tok_emb": rng.normal(0.0, INIT_STD, size=(v, d)),
        "pos_emb": rng.normal(0.0, INIT_STD, size=(config.max_seq_len, d)),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        params[p + "attn.wq"] = rng.normal(0.0, INIT_STD, size=(d, d))
        params[p + "attn.wk"] = rng.normal(0.0, INIT_STD, size=(d, d))
        params[p + "attn.wv"] = rng.normal(0.0, INIT_STD, size=(d, d))
        params[p + "attn.wo"] = rng.normal(0.0, INIT_STD, size=(d, d))
        params[p + "attn.bo"] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "mlp.w1"] = rng.normal(0.0, INIT_STD, size=(d, 4 * d))
        params[p + "mlp.b1"] = np.zeros(4 * d)
        params[p + "mlp.w2"] = rng.normal(0.0, INIT_STD, size=(4 * d, d))
        params[p + "mlp.b2"] = np.zeros(d)
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    params["head.w"] = rng.normal(0.0, INIT_STD, size=(d, v))
    params["head.b"] = np.zeros(v)
    return {k: np.ascontiguousarray(a, dtype=np.float64) for k, a in params.items()}


def param_count(config: ModelConfig) -> int:
    d, v = config.embed_dim, config.vocab_size
    per_layer = 2 * d + 4 * d * d + d + 2 * d + 4 * d * d + 4 * d + 4 * d * d + d
    return v * d + config.max_seq_len * d + config.num_layers * per_layer + 2 * d + d * v + v


def _validate_ids(ids: np.ndarray, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError("token id out of range")
    return ids.astype(np.int64)


def forward_logits(params: dict[str, Tensor], config: ModelConfig, token_ids: np.ndarray) -> Tensor:
    """Full-attention forward pass.

    `token_ids` is (seq,) or (batch, seq); the result keeps the batch axis:
    (batch, seq, vocab). Pass lifted parameters (autodiff leaves) for
    training or raw-wrapped ones under `no_grad` for inference.
    """
    ids = _validate_ids(token_ids, config)
    bsz, seqlen = ids.shape
    h_dim, n_heads = config.head_dim, config.num_heads

    x = ad.add(ad.embedding(params["tok_emb"], ids), params["pos_emb"][0:seqlen])
    for i in range(config.num_layers):
        p = f"layer{i}."
        h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = ad.mul(ad.matmul(h, params[p + "attn.wq"]), 1.0 / math.sqrt(h_dim))
        k = ad.matmul(h, params[p + "attn.wk"])
        v = ad.matmul(h, params[p + "attn.wv"])
        # (B, S, D) -> (B, H, S, dh); the score scale is folded into q above
        q = ad.swapaxes(ad.reshape(q, (bsz, seqlen, n_heads, h_dim)), 1, 2)
        k = ad.swapaxes(ad.reshape(k, (bsz, seqlen, n_heads, h_dim)), 1, 2)
        v = ad.swapaxes(ad.reshape(v, (bsz, seqlen, n_heads, h_dim)), 1, 2)
        attn = ad.softmax(ad.matmul(q, ad.swapaxes(k, 2, 3)), axis=-1)
        ctx = ad.reshape(ad.swapaxes(ad.matmul(attn, v), 1, 2), (bsz, seqlen, config.embed_dim))
        proj = ad.add(ad.matmul(ctx, params[p + "attn.wo"]), params[p + "attn.bo"])
        x = ad.add(x, proj)
        h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = ad.tanh(ad.add(ad.matmul(h, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
        h = ad.add(ad.matmul(h, params[p + "mlp.w2"]), params[p + "mlp.b2"])
        x = ad.add(x, h)
    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return ad.add(ad.matmul(x, params["head.w"]), params["head.b"])


def logits_array(params: dict[str, Array], config: ModelConfig, token_ids: np.ndarray) -> Array:
    """Inference-only forward: raw arrays in, raw (batch, seq, vocab) logits out."""
    with ad.no_grad():
        return forward_logits(ad.lift(params), config, token_ids).data


def token_distribution(logits: Array, temperature: float) -> Array:
    """Per-position sampling distribution at the given temperature.

    temperature > 0: softmax(logits / T), rows summing to 1.
    temperature == 0: one-hot at the argmax, ties broken by lowest token id.
    """
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0.0:
        best = logits.argmax(axis=-1)
        out = np.zeros_like(logits)
        np.put_along_axis(out, best[..., None], 1.0, axis=-1)
        return out
    z = logits / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def position_entropy(logits: Array) -> Array:
    """Shannon entropy (nats) of the temperature-1 distribution per position."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(shifted - log_z)
    # H = log Z - sum p * shifted  (avoids 0 * log 0)
    ent = (log_z[..., 0] - (p * shifted).sum(axis=-1))
    return np.maximum(ent, 0.0)
