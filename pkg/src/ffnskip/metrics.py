"""Degeneration metrics: n-gram repetition and trailing-loop detection.

Aggressive skipping can collapse generation into repeated fragments; these
scores quantify that on raw token ids without any judge model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class SequenceTooShortError(ValueError):
    """Fewer tokens than the n-gram size."""


def degeneration_score(ids: Sequence[int], n: int) -> float:
    """1 - (unique n-grams / total n-grams); 0 for fully distinct output,
    approaching 1 for a single repeated token."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(ids) < n:
        raise SequenceTooShortError(f"need at least {n} tokens, got {len(ids)}")
    total = len(ids) - n + 1
    unique = len({tuple(ids[i : i + n]) for i in range(total)})
    return 1.0 - unique / total


def longest_repeated_suffix_period(ids: Sequence[int]) -> int | None:
    """Period of the longest periodic suffix covering at least two full
    periods, or None when the tail does not loop. Ties prefer the shortest
    period."""
    n = len(ids)
    best: tuple[int, int] | None = None  # (suffix_len, period)
    for period in range(1, n // 2 + 1):
        run = period
        i = n - period - 1
        while i >= 0 and ids[i] == ids[i + period]:
            run += 1
            i -= 1
        if run >= 2 * period:
            if best is None or run > best[0]:
                best = (run, period)
    return best[1] if best else None


@dataclass
class DegenerationMetrics:
    """Repetition scores keyed by n (only the n that fit the sequence) plus
    the trailing loop period when one exists."""

    ngram_repetition: dict[int, float]
    longest_repeated_suffix_period: int | None

    def to_dict(self) -> dict:
        return {
            "ngram_repetition": {str(n): v for n, v in self.ngram_repetition.items()},
            "longest_repeated_suffix_period": self.longest_repeated_suffix_period,
        }


def compute_degeneration(ids: Sequence[int], ns: Sequence[int] = (2, 3, 4)) -> DegenerationMetrics:
    scores = {n: degeneration_score(ids, n) for n in ns if len(ids) >= n}
    return DegenerationMetrics(scores, longest_repeated_suffix_period(ids))
