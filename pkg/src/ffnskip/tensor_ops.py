"""Dense float32 kernels for the inference engine.

All functions are pure and operate on immutable inputs, so they are safe to
call from any number of concurrent contexts. Reductions use a fixed order:
``matmul`` accumulates along k exactly like the schoolbook triple loop, which
keeps repeated runs (and the full-model vs. no-skip comparison) bit-identical.
"""

from __future__ import annotations

import math

import numpy as np

FLOAT = np.float32


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible."""


class ZeroNormError(ValueError):
    """Cosine similarity is undefined for a zero-norm vector."""


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Computed in float64 so the score is stable against float32 rounding.
    Raises ZeroNormError when either vector has zero norm; the decode
    controller treats that case as "do not skip".
    """
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    norm_a = math.sqrt(float(np.dot(a64, a64)))
    norm_b = math.sqrt(float(np.dot(b64, b64)))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector is undefined")
    score = float(np.dot(a64, b64)) / (norm_a * norm_b)
    # Rounding overshoot must not break threshold comparisons.
    return max(-1.0, min(1.0, score))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """Root-mean-square normalization: gain * x / sqrt(mean(x^2) + eps)."""
    if x.shape != gain.shape:
        raise ShapeMismatchError(f"state shape {x.shape} != gain shape {gain.shape}")
    mean_sq = np.mean(np.square(x), dtype=FLOAT)
    inv = FLOAT(1.0) / np.sqrt(mean_sq + FLOAT(eps))
    return (x * inv * gain).astype(FLOAT, copy=False)


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted exponential normalization along the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    """SiLU activation x * sigmoid(x), stable for large-magnitude inputs."""
    # sigmoid(x) = exp(-log(1 + exp(-x))); logaddexp avoids overflow.
    return (x * np.exp(-np.logaddexp(FLOAT(0.0), -x))).astype(FLOAT, copy=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with schoolbook summation order.

    Accumulates rank-1 updates in k order so every output element receives
    its terms in the same sequence as the naive i-j-k loop. Results are
    reproducible bit-for-bit and independent of any BLAS backend.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=FLOAT)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matvec(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-vector product x @ w for a (d_in,) vector and (d_in, d_out) matrix."""
    return matmul(x[np.newaxis, :], w)[0]
