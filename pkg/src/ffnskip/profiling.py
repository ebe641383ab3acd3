"""Feed-forward saturation profiling, cold-region detection, and savings math.

Profiling runs plain full-model greedy generation over a calibration corpus
and, at every layer of every generated token, measures the cosine similarity
between the post-attention state and that state plus the feed-forward
residual. High similarity means the feed-forward block barely moved the
state; a sustained run of high, non-decreasing similarity marks the layers
where skipping is safe. The first and last few layers, where similarity is
low or falling, are the cold regions that skipping must leave intact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelConfig, Transformer
from .tensor_ops import cosine_similarity


class CalibrationError(ValueError):
    """Calibration corpus unusable."""


@dataclass
class LayerStats:
    mean: float
    std: float
    min: float
    max: float


class SimilarityAccumulator:
    """Streaming mean/std/min/max for one layer (Welford form).

    merge() is associative up to rounding, so prompt-level accumulators can
    be combined in any order with means agreeing to well under 1e-6.
    """

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0
        self.min = math.inf
        self.max = -math.inf

    def add(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (value - self.mean)
        self.min = min(self.min, value)
        self.max = max(self.max, value)

    def merge(self, other: "SimilarityAccumulator") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean
            self._m2 = other._m2
            self.min = other.min
            self.max = other.max
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / total
        self._m2 += other._m2 + delta * delta * self.count * other.count / total
        self.count = total
        self.min = min(self.min, other.min)
        self.max = max(self.max, other.max)

    def stats(self) -> LayerStats:
        variance = self._m2 / self.count if self.count else 0.0
        return LayerStats(self.mean, math.sqrt(max(variance, 0.0)), self.min, self.max)


@dataclass
class SimilarityProfile:
    """Per-layer similarity statistics over a calibration run."""

    layers: list[LayerStats]
    num_samples: int
    model_fingerprint: str

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def means(self) -> list[float]:
        return [s.mean for s in self.layers]

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "model_fingerprint": self.model_fingerprint,
            "layers": [
                {"layer": i, "mean": s.mean, "std": s.std, "min": s.min, "max": s.max}
                for i, s in enumerate(self.layers)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimilarityProfile":
        layers = [
            LayerStats(row["mean"], row["std"], row["min"], row["max"])
            for row in sorted(data["layers"], key=lambda r: r["layer"])
        ]
        return cls(layers, data["num_samples"], data["model_fingerprint"])

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "mean", "std", "min", "max"])
            for i, s in enumerate(self.layers):
                writer.writerow([i, repr(s.mean), repr(s.std), repr(s.min), repr(s.max)])


def profile_prompt(
    model: Transformer, prompt: Sequence[int], tokens_per_prompt: int
) -> list[SimilarityAccumulator]:
    """Similarity accumulators for one prompt: full-model greedy generation,
    measuring every layer of every generated token. Nothing is skipped and
    weights are never touched, so the token sequence is exactly what plain
    full-model generation produces. EOS does not stop the run; the sample
    count per layer is always tokens_per_prompt."""
    accumulators = [SimilarityAccumulator() for _ in range(model.config.num_layers)]
    cache = model.new_cache()
    logits = None
    for position, token_id in enumerate(prompt):
        logits = model.forward_full(token_id, position, cache)
    for step in range(tokens_per_prompt):
        token_id = int(np.argmax(logits))
        position = len(prompt) + step
        state = model.embed(token_id)
        for layer in range(model.config.num_layers):
            h = model.attention_substep(layer, state, cache, position)
            state = model.ffn_substep(layer, h)
            accumulators[layer].add(cosine_similarity(h, state))
        logits = model.lm_head(state)
    return accumulators


def profile_similarity(
    model: Transformer,
    calibration: Sequence[Sequence[int]],
    tokens_per_prompt: int,
    jobs: int = 1,
) -> SimilarityProfile:
    """Aggregate per-layer similarity statistics over a calibration corpus.

    Prompts use isolated caches and may be profiled in parallel; per-prompt
    accumulators are merged in corpus order at the end.
    """
    if len(calibration) == 0:
        raise CalibrationError("calibration corpus is empty")
    if tokens_per_prompt < 1:
        raise CalibrationError("tokens_per_prompt must be >= 1")
    for prompt in calibration:
        if len(prompt) == 0:
            raise CalibrationError("calibration prompt is empty")
        if len(prompt) + tokens_per_prompt > model.config.max_seq_len:
            raise CalibrationError(
                f"prompt of {len(prompt)} tokens + {tokens_per_prompt} generated "
                f"exceeds max_seq_len {model.config.max_seq_len}"
            )

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_prompt = list(
                pool.map(
                    lambda p: profile_prompt(model, p, tokens_per_prompt), calibration
                )
            )
    else:
        per_prompt = [profile_prompt(model, p, tokens_per_prompt) for p in calibration]

    merged = [SimilarityAccumulator() for _ in range(model.config.num_layers)]
    for prompt_accs in per_prompt:
        for layer, acc in enumerate(prompt_accs):
            merged[layer].merge(acc)

    num_samples = len(calibration) * tokens_per_prompt
    return SimilarityProfile(
        layers=[acc.stats() for acc in merged],
        num_samples=num_samples,
        model_fingerprint=model.fingerprint,
    )


@dataclass
class ColdRegionReport:
    """Detected non-cold interval [cold_s, cold_e); everything else is cold."""

    cold_s: int
    cold_e: int
    sigma_enter: float
    slack: float
    min_margin: int
    layer_is_cold: list[bool]
    disabled: bool = False

    def to_dict(self) -> dict:
        return {
            "cold_s": self.cold_s,
            "cold_e": self.cold_e,
            "detection": {
                "sigma_enter": self.sigma_enter,
                "slack": self.slack,
                "min_margin": self.min_margin,
            },
            "layer_is_cold": self.layer_is_cold,
            "disabled": self.disabled,
        }


def detect_cold_regions(
    profile: SimilarityProfile,
    sigma_enter: float = 0.90,
    slack: float = 0.01,
    min_margin: int = 2,
) -> ColdRegionReport:
    """Locate the skippable middle of the layer stack from a profile.

    The non-cold region is the longest contiguous interval of layers whose
    mean similarity is at least sigma_enter and never drops by more than
    ``slack`` from one layer to the next; length ties break toward the
    deeper interval. The winner is then clipped so at least ``min_margin``
    layers stay cold at each end of the stack. If nothing qualifies (or the
    clip empties the interval) the report comes back disabled with
    cold_s == cold_e == 0.
    """
    if min_margin < 0:
        raise ValueError("min_margin must be >= 0")
    num_layers = profile.num_layers
    if num_layers < 2 * min_margin + 1:
        raise ValueError(
            f"profile has {num_layers} layers; need at least {2 * min_margin + 1} "
            f"for min_margin={min_margin}"
        )
    means = profile.means()

    best: tuple[int, int] | None = None
    start = 0
    while start < num_layers:
        if means[start] < sigma_enter:
            start += 1
            continue
        end = start + 1
        while (
            end < num_layers
            and means[end] >= sigma_enter
            and means[end] >= means[end - 1] - slack
        ):
            end += 1
        if best is None or (end - start) >= (best[1] - best[0]):
            best = (start, end)
        # A maximal run can overlap the next qualifying run only at its last
        # element (the slack condition is what broke it), so resume there.
        start = end

    def _report(cold_s: int, cold_e: int, disabled: bool) -> ColdRegionReport:
        is_cold = [not (cold_s <= i < cold_e) for i in range(num_layers)]
        return ColdRegionReport(
            cold_s, cold_e, sigma_enter, slack, min_margin, is_cold, disabled
        )

    if best is None:
        return _report(0, 0, disabled=True)
    cold_s = max(best[0], min_margin)
    cold_e = min(best[1], num_layers - min_margin)
    if cold_s >= cold_e:
        return _report(0, 0, disabled=True)
    return _report(cold_s, cold_e, disabled=False)


@dataclass
class SavingsReport:
    """Parameter and FLOP accounting for feed-forward skipping."""

    attn_matrix_params: int  # one of wq/wk/wv/wo
    ffn_matrix_params: int  # one of the three feed-forward matrices
    params_attention_per_layer: int
    params_ffn_per_layer: int
    params_total_per_layer: int  # weight matrices only; norm gains excluded
    params_attention_total: int
    params_ffn_total: int
    params_total: int
    ffn_fraction_per_layer: float
    ffn_flops_per_eval: int
    attn_flops_per_eval: int
    context_len: int
    skip_ratio: float
    projected_flop_savings: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def savings_report(
    config: ModelConfig, skip_ratio: float, context_len: int | None = None
) -> SavingsReport:
    """Parameter counts and projected layer-stack FLOP savings at a skip ratio.

    FLOPs use multiply-accumulate counting (2 per MAC). Attention cost is
    evaluated at ``context_len`` cached positions (default: the model's
    max_seq_len, the conservative end).
    """
    if not 0.0 <= skip_ratio <= 1.0:
        raise ValueError(f"skip_ratio must be in [0, 1], got {skip_ratio}")
    h, f = config.hidden_dim, config.ffn_dim
    if context_len is None:
        context_len = config.max_seq_len
    attn_params = 4 * h * h
    ffn_params = 3 * h * f
    layer_params = attn_params + ffn_params
    ffn_flops = 2 * 3 * h * f
    # Projections plus score/value contractions over the cached context.
    attn_flops = 2 * 4 * h * h + 2 * 2 * context_len * h
    projected = skip_ratio * ffn_flops / (ffn_flops + attn_flops)
    return SavingsReport(
        attn_matrix_params=h * h,
        ffn_matrix_params=h * f,
        params_attention_per_layer=attn_params,
        params_ffn_per_layer=ffn_params,
        params_total_per_layer=layer_params,
        params_attention_total=attn_params * config.num_layers,
        params_ffn_total=ffn_params * config.num_layers,
        params_total=layer_params * config.num_layers,
        ffn_fraction_per_layer=ffn_params / layer_params,
        ffn_flops_per_eval=ffn_flops,
        attn_flops_per_eval=attn_flops,
        context_len=context_len,
        skip_ratio=skip_ratio,
        projected_flop_savings=projected,
    )
