"""Decode controller: skip policies, per-token trace, and the generation loop.

Policies decide, per generated token and per layer, whether the feed-forward
sub-step runs. The attention sub-step always runs and always writes the KV
cache, so the cache stays complete under every policy.

The input-adaptive policy works on one token at a time:

  * layers below ``cold_s`` and at/above ``cold_e`` always run both sub-steps;
  * inside [cold_s, cold_e) the controller computes the feed-forward output,
    measures the cosine similarity between the post-attention state and the
    state with the feed-forward residual added, and keeps the output;
  * the first layer whose similarity reaches ``sim_threshold`` arms skipping:
    up to ``max_skip_k`` following layers in the region drop their
    feed-forward sub-step and carry the post-attention state forward;
  * once the budget runs out the remaining region layers compute normally
    (without re-arming), and the flag resets for the next token.

A generate() call owns its cache and trace and is strictly sequential;
independent calls over shared weights may run concurrently.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .model import KVCache, Transformer
from .tensor_ops import ZeroNormError, cosine_similarity, softmax


class PolicyConfigError(ValueError):
    """Skip policy parameters are inconsistent with the model."""


class ContextOverflowError(ValueError):
    """Prompt plus requested tokens exceed the model context window."""


class EmptyTraceError(ValueError):
    """Trace holds no generated tokens."""


@dataclass(frozen=True)
class SkipConfig:
    """Knobs of the input-adaptive policy.

    warm_up_index of None resolves at generate() time to ceil(0.1 *
    max_new_tokens): the first ~10% of generated tokens run at full strength
    to stabilize the KV cache. max_skip_k of None means unbounded (skip all
    remaining region layers once armed).
    """

    sim_threshold: float
    cold_s: int
    cold_e: int
    warm_up_index: int | None = None
    max_skip_k: int | None = None

    def __post_init__(self) -> None:
        if self.sim_threshold <= 0:
            raise PolicyConfigError("sim_threshold must be positive")
        if self.cold_s < 0 or self.cold_e < self.cold_s:
            raise PolicyConfigError(
                f"need 0 <= cold_s <= cold_e, got cold_s={self.cold_s} cold_e={self.cold_e}"
            )
        if self.warm_up_index is not None and self.warm_up_index < 0:
            raise PolicyConfigError("warm_up_index must be >= 0")
        if self.max_skip_k is not None and self.max_skip_k < 1:
            raise PolicyConfigError("max_skip_k must be >= 1 (or None for unbounded)")


@dataclass(frozen=True)
class Full:
    """Reference policy: no skipping anywhere."""


@dataclass(frozen=True)
class RandomAnywhere:
    """Baseline: every layer's FFN dropped independently with probability p,
    with no regard for layer position."""

    p: float
    seed: int = 0
    warm_up_index: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise PolicyConfigError(f"p must be in [0, 1], got {self.p}")


@dataclass(frozen=True)
class RandomNonCold:
    """Baseline: FFNs dropped at random with probability p, but only inside
    [cold_s, cold_e); no per-token similarity tracking."""

    p: float
    cold_s: int
    cold_e: int
    seed: int = 0
    warm_up_index: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise PolicyConfigError(f"p must be in [0, 1], got {self.p}")
        if self.cold_s < 0 or self.cold_e < self.cold_s:
            raise PolicyConfigError(
                f"need 0 <= cold_s <= cold_e, got cold_s={self.cold_s} cold_e={self.cold_e}"
            )


@dataclass(frozen=True)
class InputAdaptive:
    config: SkipConfig


SkipPolicy = Union[Full, RandomAnywhere, RandomNonCold, InputAdaptive]


@dataclass(frozen=True)
class Sampling:
    """temperature == 0 selects greedy argmax; otherwise softmax sampling at
    the given temperature, seeded for reproducibility."""

    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class DecodeRequest:
    prompt: tuple[int, ...]
    max_new_tokens: int
    sampling: Sampling = Sampling()
    eos_id: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", tuple(self.prompt))
        if len(self.prompt) == 0:
            raise ValueError("prompt must hold at least one token")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class LayerRecord:
    ffn_skipped: bool
    sim_score: float | None = None


@dataclass
class TokenTrace:
    token_index: int
    layers: list[LayerRecord]
    trigger_layer: int | None = None


class SkipTrace:
    """Per-token, per-layer record of every skip decision of one generation."""

    def __init__(self, num_layers: int, policy_label: str):
        self.num_layers = num_layers
        self.policy_label = policy_label
        self.tokens: list[TokenTrace] = []

    def append(self, token: TokenTrace) -> None:
        self.tokens.append(token)

    @property
    def tokens_generated(self) -> int:
        return len(self.tokens)

    @property
    def total_ffn_skips(self) -> int:
        return sum(rec.ffn_skipped for tok in self.tokens for rec in tok.layers)

    @property
    def total_ffn_evaluations(self) -> int:
        return sum(not rec.ffn_skipped for tok in self.tokens for rec in tok.layers)

    def skips_by_layer(self) -> list[int]:
        counts = [0] * self.num_layers
        for tok in self.tokens:
            for layer, rec in enumerate(tok.layers):
                counts[layer] += rec.ffn_skipped
        return counts

    def trigger_layer_histogram(self) -> list[int]:
        counts = [0] * self.num_layers
        for tok in self.tokens:
            if tok.trigger_layer is not None:
                counts[tok.trigger_layer] += 1
        return counts

    def summary(self) -> dict:
        return {
            "policy": self.policy_label,
            "skip_ratio": skip_ratio(self),
            "skips_by_layer": self.skips_by_layer(),
            "trigger_layer_histogram": self.trigger_layer_histogram(),
            "tokens_generated": self.tokens_generated,
        }

    def token_lines(self) -> list[str]:
        """Line-delimited serialization, one generated token per line."""
        lines = []
        for tok in self.tokens:
            lines.append(
                json.dumps(
                    {
                        "token_index": tok.token_index,
                        "trigger_layer": tok.trigger_layer,
                        "layers": [
                            {"ffn_skipped": rec.ffn_skipped, "sim_score": rec.sim_score}
                            for rec in tok.layers
                        ],
                    }
                )
            )
        return lines

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.token_lines()) + "\n", encoding="utf-8")


def skip_ratio(trace: SkipTrace) -> float:
    """Fraction of (token, layer) FFN evaluations avoided."""
    if trace.tokens_generated == 0:
        raise EmptyTraceError("skip ratio of an empty trace is undefined")
    if trace.num_layers == 0:
        return 0.0
    return trace.total_ffn_skips / (trace.tokens_generated * trace.num_layers)


def random_skip_mask(
    policy: RandomAnywhere | RandomNonCold, token_index: int, num_layers: int
) -> np.ndarray:
    """Per-layer skip mask; a pure function of (policy seed, token_index).

    Warm-up tokens get an all-false mask. RandomNonCold masks are zeroed
    outside [cold_s, cold_e).
    """
    if token_index <= policy.warm_up_index:
        return np.zeros(num_layers, dtype=bool)
    rng = np.random.default_rng([policy.seed, token_index])
    mask = rng.random(num_layers) < policy.p
    if isinstance(policy, RandomNonCold):
        eligible = np.zeros(num_layers, dtype=bool)
        eligible[policy.cold_s : policy.cold_e] = True
        mask &= eligible
    return mask


def _full_token_trace(token_index: int, num_layers: int) -> TokenTrace:
    return TokenTrace(token_index, [LayerRecord(False) for _ in range(num_layers)])


def _step_full(
    model: Transformer, token_id: int, position: int, cache: KVCache, token_index: int
) -> tuple[np.ndarray, TokenTrace]:
    logits = model.forward_full(token_id, position, cache)
    return logits, _full_token_trace(token_index, model.config.num_layers)


def _step_masked(
    model: Transformer,
    token_id: int,
    position: int,
    cache: KVCache,
    token_index: int,
    mask: np.ndarray,
) -> tuple[np.ndarray, TokenTrace]:
    state = model.embed(token_id)
    records = []
    for layer in range(model.config.num_layers):
        state = model.attention_substep(layer, state, cache, position)
        if mask[layer]:
            records.append(LayerRecord(True))
        else:
            state = model.ffn_substep(layer, state)
            records.append(LayerRecord(False))
    return model.lm_head(state), TokenTrace(token_index, records)


def decode_token_adaptive(
    model: Transformer,
    token_id: int,
    position: int,
    cache: KVCache,
    config: SkipConfig,
    token_index: int,
) -> tuple[np.ndarray, TokenTrace]:
    """One post-warm-up token under the input-adaptive policy.

    The caller routes warm-up tokens to the full model; this function always
    tracks similarity from cold_s until the threshold arms skipping.
    """
    num_layers = model.config.num_layers
    state = model.embed(token_id)
    records: list[LayerRecord] = []
    trigger: int | None = None

    for layer in range(0, config.cold_s):
        state = model.attention_substep(layer, state, cache, position)
        state = model.ffn_substep(layer, state)
        records.append(LayerRecord(False))

    budget = 0  # armed skips remaining; 0 with trigger set means exhausted
    for layer in range(config.cold_s, config.cold_e):
        h = model.attention_substep(layer, state, cache, position)
        if trigger is not None and budget > 0:
            budget -= 1
            state = h
            records.append(LayerRecord(True))
        elif trigger is None:
            temp = model.ffn_substep(layer, h)
            try:
                sim = cosine_similarity(h, temp)
            except ZeroNormError:
                sim = None  # degenerate state: never fabricate a skip
            if sim is not None and sim >= config.sim_threshold:
                trigger = layer
                remaining = config.cold_e - layer - 1
                budget = remaining if config.max_skip_k is None else min(
                    config.max_skip_k, remaining
                )
            state = temp
            records.append(LayerRecord(False, sim_score=sim))
        else:
            # Budget exhausted: back to full compute, no re-arming.
            state = model.ffn_substep(layer, h)
            records.append(LayerRecord(False))

    for layer in range(config.cold_e, num_layers):
        state = model.attention_substep(layer, state, cache, position)
        state = model.ffn_substep(layer, state)
        records.append(LayerRecord(False))

    return model.lm_head(state), TokenTrace(token_index, records, trigger_layer=trigger)


@dataclass
class GenerationResult:
    tokens: list[int]
    trace: SkipTrace
    final_logits: np.ndarray
    cache: KVCache
    step_seconds: list[float] = field(default_factory=list)


def _policy_label(policy: SkipPolicy) -> str:
    return {
        Full: "full",
        RandomAnywhere: "random",
        RandomNonCold: "random-noncold",
        InputAdaptive: "adaptive",
    }[type(policy)]


def _validate_policy(policy: SkipPolicy, num_layers: int) -> None:
    if isinstance(policy, InputAdaptive):
        if policy.config.cold_e > num_layers:
            raise PolicyConfigError(
                f"cold_e {policy.config.cold_e} exceeds num_layers {num_layers}"
            )
    elif isinstance(policy, RandomNonCold):
        if policy.cold_e > num_layers:
            raise PolicyConfigError(
                f"cold_e {policy.cold_e} exceeds num_layers {num_layers}"
            )


def _resolve_warm_up(policy: SkipPolicy, max_new_tokens: int) -> SkipPolicy:
    if isinstance(policy, InputAdaptive) and policy.config.warm_up_index is None:
        resolved = SkipConfig(
            sim_threshold=policy.config.sim_threshold,
            cold_s=policy.config.cold_s,
            cold_e=policy.config.cold_e,
            warm_up_index=math.ceil(0.1 * max_new_tokens),
            max_skip_k=policy.config.max_skip_k,
        )
        return InputAdaptive(resolved)
    return policy


def _make_sampler(sampling: Sampling):
    if sampling.temperature == 0.0:
        return lambda logits: int(np.argmax(logits))
    rng = np.random.default_rng(sampling.seed)

    def sample(logits: np.ndarray) -> int:
        probs = softmax(logits.astype(np.float64) / sampling.temperature)
        probs /= probs.sum()
        return int(rng.choice(len(probs), p=probs))

    return sample


def generate(
    model: Transformer, request: DecodeRequest, policy: SkipPolicy
) -> GenerationResult:
    """Autoregressive decode under a skip policy.

    The prompt is prefilled with the full model; every generated token is
    then forwarded through the stack under the policy (the trace covers each
    one), stopping after max_new_tokens or on the end-of-sequence token.
    """
    cfg = model.config
    total = len(request.prompt) + request.max_new_tokens
    if total > cfg.max_seq_len:
        raise ContextOverflowError(
            f"prompt ({len(request.prompt)}) + max_new_tokens ({request.max_new_tokens}) "
            f"= {total} exceeds max_seq_len {cfg.max_seq_len}"
        )
    _validate_policy(policy, cfg.num_layers)
    policy = _resolve_warm_up(policy, request.max_new_tokens)

    cache = model.new_cache()
    trace = SkipTrace(cfg.num_layers, _policy_label(policy))
    sample = _make_sampler(request.sampling)

    logits = np.zeros(cfg.vocab_size, dtype=np.float32)
    for position, token_id in enumerate(request.prompt):
        logits = model.forward_full(token_id, position, cache)

    tokens: list[int] = []
    step_seconds: list[float] = []
    prompt_len = len(request.prompt)
    for token_index in range(request.max_new_tokens):
        token_id = sample(logits)
        tokens.append(token_id)
        started = time.perf_counter()
        position = prompt_len + token_index
        if isinstance(policy, Full):
            logits, record = _step_full(model, token_id, position, cache, token_index)
        elif isinstance(policy, (RandomAnywhere, RandomNonCold)):
            mask = random_skip_mask(policy, token_index, cfg.num_layers)
            logits, record = _step_masked(
                model, token_id, position, cache, token_index, mask
            )
        else:
            skip_cfg = policy.config
            if token_index <= skip_cfg.warm_up_index:
                logits, record = _step_full(model, token_id, position, cache, token_index)
            else:
                logits, record = decode_token_adaptive(
                    model, token_id, position, cache, skip_cfg, token_index
                )
        step_seconds.append(time.perf_counter() - started)
        trace.append(record)
        if request.eos_id is not None and token_id == request.eos_id:
            break

    return GenerationResult(tokens, trace, logits, cache, step_seconds)
