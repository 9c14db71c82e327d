"""Numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``FORGELINE_PURE=1`` is set. Both backends must agree bit for bit.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def accumulate(acc: np.ndarray, src: np.ndarray, weight: float) -> None:
    """acc += weight * src, elementwise in float64."""
    acc += float(weight) * src.astype(np.float64)


def f64_to_bf16(x: np.ndarray) -> np.ndarray:
    # Round-to-odd into float32 first so the second (nearest-even) rounding
    # to bfloat16 is equivalent to a single correctly rounded step.
    x = np.ascontiguousarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        t = x.astype(np.float32)
        over = np.abs(t.astype(np.float64)) > np.abs(x)
        t = np.where(over, np.nextafter(t, np.float32(0)), t)
        inexact = t.astype(np.float64) != x
    bits = t.view(np.uint32).astype(np.uint64)
    bits |= inexact.astype(np.uint64)
    out = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    nan = np.isnan(x)
    if nan.any():
        out[nan] = (bits[nan] >> 16) | 0x0040
    return out.astype(np.uint16)


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    wide = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return wide.view(np.float32)


def transition_counts(
    flat: np.ndarray,
    offsets: np.ndarray,
    weights: np.ndarray,
    bos: int,
    vocab_size: int,
) -> np.ndarray:
    """Weighted bigram transition counts.

    Sequence ``s`` occupies ``flat[offsets[s]:offsets[s+1]]`` and is implicitly
    preceded by ``bos``. Returns a ``[V, V]`` float64 matrix where entry
    ``(a, b)`` sums the weights of every ``a -> b`` transition.
    """
    flat = np.asarray(flat, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    counts = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    if flat.size == 0:
        return counts
    prev = np.empty_like(flat)
    prev[1:] = flat[:-1]
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    prev[starts[lengths > 0]] = bos
    seq_w = np.repeat(weights, lengths)
    np.add.at(counts, (prev, flat), seq_w)
    return counts
