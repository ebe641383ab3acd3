"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from ffnskip import ModelConfig, Transformer, init_random_weights
from ffnskip.model import weights_from_dict, weights_to_dict


def make_model(
    num_layers: int = 4,
    hidden_dim: int = 16,
    num_heads: int = 2,
    ffn_dim: int = 32,
    vocab_size: int = 300,
    max_seq_len: int = 64,
    seed: int = 0,
) -> Transformer:
    config = ModelConfig(
        num_layers=num_layers,
        hidden_dim=hidden_dim,
        num_heads=num_heads,
        ffn_dim=ffn_dim,
        vocab_size=vocab_size,
        max_seq_len=max_seq_len,
    )
    return Transformer(config, init_random_weights(config, seed))


def rig_zero_ffn(model: Transformer, layers: set[int] | None = None) -> Transformer:
    """Copy of the model whose FFN weights are zero in the given layers (all
    layers when None): the FFN residual vanishes there, so the pre/post
    cosine similarity is exactly 1."""
    tensors = {name: arr.copy() for name, arr in weights_to_dict(model.weights).items()}
    target = set(range(model.config.num_layers)) if layers is None else layers
    for i in target:
        for name in ("ff_w1", "ff_w2", "ff_w3"):
            tensors[f"layers.{i}.{name}"][:] = 0.0
    return Transformer(model.config, weights_from_dict(model.config, tensors))


def brute_force_cold_regions(
    means: list[float], sigma_enter: float, slack: float, min_margin: int
) -> tuple[int, int, bool]:
    """Independent O(L^2) oracle for the cold-region rule: enumerate every
    interval, keep the longest qualifying one (ties to the later interval),
    then clip to the margins. Returns (cold_s, cold_e, disabled)."""
    n = len(means)
    best = None  # (length, start, end)
    for s in range(n):
        for e in range(s + 1, n + 1):
            ok = all(means[i] >= sigma_enter for i in range(s, e)) and all(
                means[i + 1] >= means[i] - slack for i in range(s, e - 1)
            )
            if not ok:
                continue
            key = (e - s, s)
            if best is None or key >= (best[0], best[1]):
                best = (e - s, s, e)
    if best is None:
        return 0, 0, True
    cold_s = max(best[1], min_margin)
    cold_e = min(best[2], n - min_margin)
    if cold_s >= cold_e:
        return 0, 0, True
    return cold_s, cold_e, False


@pytest.fixture
def toy_model() -> Transformer:
    return make_model()
