"""Decode-loop benchmarking under a skip policy.

Throughput counts generated tokens only (prefill excluded) over wall-clock
time; the reported run is the median-throughput run out of ``runs`` repeats,
so one noisy run cannot skew the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import compute_degeneration
from .model import Transformer
from .skipping import DecodeRequest, GenerationResult, SkipPolicy, generate, skip_ratio


@dataclass
class BenchReport:
    policy: str
    skip_ratio: float
    tokens_per_second: float
    latency_mean_s: float
    latency_p95_s: float
    tokens_generated: int
    ffn_executed: int
    ffn_skipped: int
    degeneration: dict
    runs: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_benchmark(
    model: Transformer, request: DecodeRequest, policy: SkipPolicy, runs: int = 3
) -> BenchReport:
    """Repeat one generation ``runs`` times and report the median-throughput
    run. All repeats produce identical tokens (the decode is deterministic),
    so only timing varies."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    timed: list[tuple[float, GenerationResult]] = []
    for _ in range(runs):
        result = generate(model, request, policy)
        decode_time = sum(result.step_seconds)
        tps = len(result.tokens) / decode_time if decode_time > 0 else float("inf")
        timed.append((tps, result))

    timed.sort(key=lambda pair: pair[0])
    tps, result = timed[len(timed) // 2]
    steps = np.array(result.step_seconds)
    trace = result.trace
    return BenchReport(
        policy=trace.policy_label,
        skip_ratio=skip_ratio(trace),
        tokens_per_second=tps,
        latency_mean_s=float(steps.mean()),
        latency_p95_s=float(np.percentile(steps, 95)),
        tokens_generated=trace.tokens_generated,
        ffn_executed=trace.total_ffn_evaluations,
        ffn_skipped=trace.total_ffn_skips,
        degeneration=compute_degeneration(result.tokens).to_dict(),
        runs=runs,
    )
