"""Decoder-only transformer core with separable attention and FFN sub-steps.

The layer forward pass is split in two so a decode controller can skip the
feed-forward half of a layer while the attention half still runs and writes
the KV cache. The cache is written by every layer for every position,
unconditionally: skipping can therefore never leave a gap in it.

Weights are immutable after construction (arrays are flagged read-only) and
may be shared across any number of decode sessions. A KVCache belongs to
exactly one session and is strictly single-threaded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import FLOAT, matvec, rms_norm, silu, softmax


class ConfigError(ValueError):
    """Architecture hyperparameters are inconsistent."""


class TokenRangeError(ValueError):
    """Token id outside the embedding table."""


class CacheInvariantError(RuntimeError):
    """KV cache length disagrees with the position being decoded.

    This is a hard failure: a mismatched cache means some earlier layer or
    position was skipped in a way that corrupted the session.
    """


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters defining the network shape."""

    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq_len: int
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        for name in ("hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if (self.hidden_dim // self.num_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be > 0")
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class LayerWeights:
    """Per-layer tensors. Matrices are stored so that y = x @ W."""

    wq: np.ndarray  # (hidden, hidden)
    wk: np.ndarray  # (hidden, hidden)
    wv: np.ndarray  # (hidden, hidden)
    wo: np.ndarray  # (hidden, hidden)
    ff_w1: np.ndarray  # (hidden, ffn)
    ff_w2: np.ndarray  # (ffn, hidden)
    ff_w3: np.ndarray  # (hidden, ffn)
    attn_norm_gain: np.ndarray  # (hidden,)
    ffn_norm_gain: np.ndarray  # (hidden,)


@dataclass
class Weights:
    """Full parameter set: embedding, per-layer tensors, final norm, LM head."""

    embedding: np.ndarray  # (vocab, hidden)
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray  # (hidden,)
    output: np.ndarray  # (hidden, vocab)


# Canonical tensor naming shared by the file format and the random initializer.
LAYER_TENSOR_FIELDS = (
    "wq", "wk", "wv", "wo", "ff_w1", "ff_w2", "ff_w3", "attn_norm_gain", "ffn_norm_gain",
)


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape manifest of every tensor in the architecture."""
    h, f = config.hidden_dim, config.ffn_dim
    layer_shapes = {
        "wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h),
        "ff_w1": (h, f), "ff_w2": (f, h), "ff_w3": (h, f),
        "attn_norm_gain": (h,), "ffn_norm_gain": (h,),
    }
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, h)}
    for i in range(config.num_layers):
        for name in LAYER_TENSOR_FIELDS:
            shapes[f"layers.{i}.{name}"] = layer_shapes[name]
    shapes["final_norm_gain"] = (h,)
    shapes["output"] = (h, config.vocab_size)
    return shapes


def weights_to_dict(weights: Weights) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {"embedding": weights.embedding}
    for i, layer in enumerate(weights.layers):
        for name in LAYER_TENSOR_FIELDS:
            out[f"layers.{i}.{name}"] = getattr(layer, name)
    out["final_norm_gain"] = weights.final_norm_gain
    out["output"] = weights.output
    return out


def weights_from_dict(config: ModelConfig, tensors: dict[str, np.ndarray]) -> Weights:
    layers = [
        LayerWeights(**{name: tensors[f"layers.{i}.{name}"] for name in LAYER_TENSOR_FIELDS})
        for i in range(config.num_layers)
    ]
    return Weights(
        embedding=tensors["embedding"],
        layers=layers,
        final_norm_gain=tensors["final_norm_gain"],
        output=tensors["output"],
    )


def weights_fingerprint(weights: Weights) -> str:
    """SHA-256 over all tensor bytes in canonical order; changes iff any byte does."""
    digest = hashlib.sha256()
    for _, tensor in sorted_tensor_items(weights):
        digest.update(np.ascontiguousarray(tensor, dtype=FLOAT).tobytes())
    return digest.hexdigest()


def sorted_tensor_items(weights: Weights) -> list[tuple[str, np.ndarray]]:
    """Tensor items in the canonical manifest order (not alphabetical)."""
    return list(weights_to_dict(weights).items())


def init_random_weights(config: ModelConfig, seed: int) -> Weights:
    """Deterministic random init, scale 1/sqrt(fan_in) per matrix, gains at one.

    Tensors are drawn from a single PCG64 stream in canonical manifest order,
    so (config, seed) fully determines every byte on every platform.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm_gain"):
            tensors[name] = np.ones(shape, dtype=FLOAT)
            continue
        # fan_in of y = x @ W is the first axis; embedding rows are scaled
        # like a hidden-dim projection so initial states have unit-order RMS.
        fan_in = shape[0] if len(shape) == 2 else config.hidden_dim
        if name == "embedding":
            fan_in = config.hidden_dim
        scale = FLOAT(1.0 / np.sqrt(fan_in))
        tensors[name] = rng.standard_normal(shape, dtype=FLOAT) * scale
    weights = weights_from_dict(config, tensors)
    freeze_weights(weights)
    return weights


def freeze_weights(weights: Weights) -> None:
    """Mark every tensor read-only; sessions share weights, never mutate them."""
    for _, tensor in sorted_tensor_items(weights):
        tensor.flags.writeable = False


class KVCache:
    """Per-layer keys/values for all decoded positions of one session.

    Invariant: after decoding position t, every layer holds exactly t+1
    entries, regardless of which skip policy drove the decode.
    """

    def __init__(self, config: ModelConfig):
        shape = (config.max_seq_len, config.num_heads, config.head_dim)
        self.keys = [np.zeros(shape, dtype=FLOAT) for _ in range(config.num_layers)]
        self.values = [np.zeros(shape, dtype=FLOAT) for _ in range(config.num_layers)]
        self._lengths = [0] * config.num_layers
        self.max_seq_len = config.max_seq_len

    @property
    def num_layers(self) -> int:
        return len(self._lengths)

    def length(self, layer: int) -> int:
        return self._lengths[layer]

    def lengths(self) -> list[int]:
        return list(self._lengths)

    def append(self, layer: int, position: int, k: np.ndarray, v: np.ndarray) -> None:
        if self._lengths[layer] != position:
            raise CacheInvariantError(
                f"layer {layer} cache holds {self._lengths[layer]} entries, "
                f"cannot append position {position}"
            )
        if position >= self.max_seq_len:
            raise CacheInvariantError(
                f"position {position} exceeds max_seq_len {self.max_seq_len}"
            )
        self.keys[layer][position] = k
        self.values[layer][position] = v
        self._lengths[layer] = position + 1


def _rope_tables(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = 1.0 / (config.rope_theta ** (np.arange(0, half, dtype=np.float64) * 2 / config.head_dim))
    angles = np.outer(np.arange(config.max_seq_len, dtype=np.float64), inv_freq)
    emb = np.concatenate([angles, angles], axis=-1)
    return np.cos(emb).astype(FLOAT), np.sin(emb).astype(FLOAT)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


class Transformer:
    """LLaMA-style decoder: pre-norm RMS, RoPE, multi-head causal attention,
    SwiGLU feed-forward, all over a single token per step (batch size 1)."""

    def __init__(self, config: ModelConfig, weights: Weights):
        self.config = config
        self.weights = weights
        freeze_weights(weights)
        self._cos, self._sin = _rope_tables(config)
        # Column-fused projections: identical per-column arithmetic, fewer
        # accumulation passes. Built once; safe because columns are independent.
        self._wqkv = [
            np.concatenate([lw.wq, lw.wk, lw.wv], axis=1) for lw in weights.layers
        ]
        self._w13 = [
            np.concatenate([lw.ff_w1, lw.ff_w3], axis=1) for lw in weights.layers
        ]
        self._fingerprint: str | None = None

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = weights_fingerprint(self.weights)
        return self._fingerprint

    def new_cache(self) -> KVCache:
        return KVCache(self.config)

    def embed(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.config.vocab_size:
            raise TokenRangeError(
                f"token id {token_id} outside vocabulary of size {self.config.vocab_size}"
            )
        return self.weights.embedding[token_id].copy()

    def attention_substep(
        self, layer: int, state: np.ndarray, cache: KVCache, position: int
    ) -> np.ndarray:
        """Residual attention half of a layer; always appends this position's
        key/value to the cache before attending over positions 0..position."""
        cfg = self.config
        lw = self.weights.layers[layer]
        x = rms_norm(state, lw.attn_norm_gain, cfg.norm_eps)
        qkv = matvec(x, self._wqkv[layer])
        h = cfg.hidden_dim
        q = qkv[:h].reshape(cfg.num_heads, cfg.head_dim)
        k = qkv[h : 2 * h].reshape(cfg.num_heads, cfg.head_dim)
        v = qkv[2 * h :].reshape(cfg.num_heads, cfg.head_dim)

        cos, sin = self._cos[position], self._sin[position]
        q = q * cos + _rotate_half(q) * sin
        k = k * cos + _rotate_half(k) * sin

        cache.append(layer, position, k, v)

        scale = FLOAT(1.0 / np.sqrt(cfg.head_dim))
        ctx = np.empty((cfg.num_heads, cfg.head_dim), dtype=FLOAT)
        for head in range(cfg.num_heads):
            keys = cache.keys[layer][: position + 1, head, :]
            vals = cache.values[layer][: position + 1, head, :]
            # Fixed-order accumulations, same discipline as matmul.
            scores = np.zeros(position + 1, dtype=FLOAT)
            for d in range(cfg.head_dim):
                scores += keys[:, d] * q[head, d]
            attn = softmax(scores * scale)
            out = np.zeros(cfg.head_dim, dtype=FLOAT)
            for t in range(position + 1):
                out += attn[t] * vals[t]
            ctx[head] = out
        attn_out = matvec(ctx.reshape(cfg.hidden_dim), lw.wo)
        return (state + attn_out).astype(FLOAT, copy=False)

    def ffn_substep(self, layer: int, state: np.ndarray) -> np.ndarray:
        """Residual SwiGLU feed-forward half of a layer; touches no cache."""
        cfg = self.config
        lw = self.weights.layers[layer]
        x = rms_norm(state, lw.ffn_norm_gain, cfg.norm_eps)
        gate_up = matvec(x, self._w13[layer])
        f = cfg.ffn_dim
        inner = silu(gate_up[:f]) * gate_up[f:]
        return (state + matvec(inner, lw.ff_w2)).astype(FLOAT, copy=False)

    def lm_head(self, state: np.ndarray) -> np.ndarray:
        """Final RMS-norm followed by projection to vocabulary logits."""
        x = rms_norm(state, self.weights.final_norm_gain, self.config.norm_eps)
        return matvec(x, self.weights.output)

    def forward_full(
        self, token_id: int, position: int, cache: KVCache
    ) -> np.ndarray:
        """Full-strength pass: every layer runs attention then feed-forward."""
        state = self.embed(token_id)
        for layer in range(self.config.num_layers):
            state = self.attention_substep(layer, state, cache, position)
            state = self.ffn_substep(layer, state)
        return self.lm_head(state)
