"""Pure-Python versions of the hot loops in ``_kernels.pyx``.

Both backends must agree bit-for-bit; ``tests/test_kernels.py`` checks parity.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_codepoints(text: str) -> int:
    """64-bit FNV-1a over each code point as 4 little-endian bytes."""
    h = FNV_OFFSET
    for ch in text:
        cp = ord(ch)
        for shift in (0, 8, 16, 24):
            h ^= (cp >> shift) & 0xFF
            h = (h * FNV_PRIME) & _MASK
    return h


def hashed_trigram_counts(text: str, dimension: int) -> np.ndarray:
    out = np.zeros(dimension, dtype=np.float64)
    n = len(text)
    if n == 0:
        return out
    grams = [text] if n < 3 else [text[i : i + 3] for i in range(n - 2)]
    for gram in grams:
        h = fnv1a_codepoints(gram)
        sign = -1.0 if (h >> 63) & 1 else 1.0
        out[h % dimension] += sign
    return out


def char_ngram_stats(reference: str, hypothesis: str, order: int) -> list[tuple[int, int, int]]:
    """Per n-gram order 1..order: (clipped matches, hypothesis total, reference total)."""
    stats = []
    for n in range(1, order + 1):
        ref_counts: dict[str, int] = {}
        for i in range(len(reference) - n + 1):
            g = reference[i : i + n]
            ref_counts[g] = ref_counts.get(g, 0) + 1
        hyp_counts: dict[str, int] = {}
        for i in range(len(hypothesis) - n + 1):
            g = hypothesis[i : i + n]
            hyp_counts[g] = hyp_counts.get(g, 0) + 1
        matches = 0
        for g, c in hyp_counts.items():
            r = ref_counts.get(g)
            if r:
                matches += c if c < r else r
        stats.append(
            (matches, max(len(hypothesis) - n + 1, 0), max(len(reference) - n + 1, 0))
        )
    return stats
