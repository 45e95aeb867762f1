"""Tokenization and hashed bag-of-tokens featurization.

One tokenizer is shared by the sparse scorer and the embedding featurizer so
that lexical and learned scores see the same token stream.
"""

from __future__ import annotations

import re

TOKEN_RE = re.compile(r"[a-z0-9]+")

FEATURE_DIM = 32768

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; empty tokens dropped."""
    return TOKEN_RE.findall(text.lower())


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a hash over the UTF-8 bytes of ``text``."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def bucket(token: str, dim: int = FEATURE_DIM) -> int:
    return fnv1a_64(token) % dim


def featurize(text: str, dim: int = FEATURE_DIM) -> dict[int, float]:
    """Sparse token-count vector: bucket index -> count (counts always > 0)."""
    counts: dict[int, float] = {}
    for token in tokenize(text):
        b = fnv1a_64(token) % dim
        counts[b] = counts.get(b, 0.0) + 1.0
    return counts


def l2_normalize(vec: dict[int, float]) -> dict[int, float]:
    """Unit-norm copy of a sparse vector; the empty vector stays empty."""
    if not vec:
        return {}
    norm = sum(v * v for v in vec.values()) ** 0.5
    return {k: v / norm for k, v in vec.items()}
