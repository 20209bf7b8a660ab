"""Deterministic stand-in for a host model's text embeddings."""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

import numpy as np

from .tensor import Tensor

VOCAB = 4096
_TABLE_TAG = 0x7E47


@lru_cache(maxsize=8)
def _table(channels: int, vocab: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([_TABLE_TAG, channels, vocab, seed])
    table = rng.standard_normal((vocab, channels)) / np.sqrt(channels)
    table.setflags(write=False)
    return table


def words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def word_id(word: str, vocab: int = VOCAB) -> int:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % vocab


def embed_text(text: str, channels: int, vocab: int = VOCAB, seed: int = 0) -> Tensor:
    """``[S, C]`` embeddings, one row per word; an empty string gives ``S = 0``."""
    ids = [word_id(w, vocab) for w in words(text)]
    table = _table(channels, vocab, seed)
    if not ids:
        return Tensor._wrap(np.zeros((0, channels)))
    return Tensor._wrap(table[ids])
