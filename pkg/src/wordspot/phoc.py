"""Pyramidal character-histogram label vectors for word images.

A word of length n is divided into pyramid levels; at level L the word is
split into L regions.  A character (or character bigram) sets the bit of a
region when at least half of the character's normalized occupancy interval
falls inside that region.  Concatenating the per-level, per-region histograms
over a fixed alphabet yields a fixed-length binary attribute vector that is
independent of word length.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LATIN36 = "abcdefghijklmnopqrstuvwxyz0123456789"


@dataclass(frozen=True)
class Alphabet:
    """Ordered set of single-character symbols defining histogram slots."""

    symbols: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("alphabet must contain at least one symbol")
        for s in self.symbols:
            if not isinstance(s, str) or len(s) != 1:
                raise ValueError(f"alphabet symbols must be single characters, got {s!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be distinct")
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch in self.index


def build_alphabet(spec: str | Iterable[str]) -> Alphabet:
    """Build an :class:`Alphabet` from the name ``"latin36"`` or an iterable of symbols."""
    if isinstance(spec, str) and spec == "latin36":
        return Alphabet(tuple(LATIN36))
    return Alphabet(tuple(spec))


def load_alphabet_file(path) -> Alphabet:
    """Read an alphabet from a UTF-8 text file, one symbol per line."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    symbols = []
    for ln, line in enumerate(lines, start=1):
        if len(line) != 1:
            raise ValueError(f"{path}: line {ln}: expected exactly one symbol, got {line!r}")
        symbols.append(line)
    return Alphabet(tuple(symbols))


def load_bigram_file(path) -> list[str]:
    """Read a bigram list from a UTF-8 text file, one two-character string per line."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    bigrams = []
    for ln, line in enumerate(lines, start=1):
        if len(line) != 2:
            raise ValueError(f"{path}: line {ln}: expected a two-character bigram, got {line!r}")
        bigrams.append(line)
    return bigrams


def normalize_transcription(raw: str, alphabet: Alphabet) -> str:
    """Lowercase ``raw`` and drop every character outside ``alphabet``."""
    lowered = raw.lower()
    return "".join(ch for ch in lowered if ch in alphabet)


def occupancy(k: int, n: int) -> tuple[float, float]:
    """Normalized interval [k/n, (k+1)/n) occupied by item ``k`` of ``n``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0 <= k < n:
        raise ValueError(f"k must be in [0, {n}), got {k}")
    return (k / n, (k + 1) / n)


def select_bigrams(transcriptions: Sequence[str], k: int, alphabet: Alphabet) -> list[str]:
    """Return the ``k`` most frequent adjacent character pairs in ``transcriptions``.

    Only pairs whose both characters belong to ``alphabet`` are counted.
    Ties are broken lexicographically so the selection is deterministic.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    counts: Counter[str] = Counter()
    for word in transcriptions:
        for i in range(len(word) - 1):
            pair = word[i : i + 2]
            if pair[0] in alphabet and pair[1] in alphabet:
                counts[pair] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [pair for pair, _ in ranked[:k]]


@dataclass(frozen=True)
class PhocConfig:
    """Label-vector layout: alphabet, unigram pyramid levels, optional bigrams."""

    alphabet: Alphabet
    unigram_levels: tuple[int, ...] = (2, 3, 4, 5)
    bigrams: tuple[str, ...] = ()
    bigram_levels: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "unigram_levels", tuple(self.unigram_levels))
        object.__setattr__(self, "bigrams", tuple(self.bigrams))
        bl = tuple(self.bigram_levels)
        if self.bigrams and not bl:
            bl = (2,)
        object.__setattr__(self, "bigram_levels", bl)
        _check_levels(self.unigram_levels, "unigram_levels")
        if not self.unigram_levels:
            raise ValueError("unigram_levels must not be empty")
        if self.bigrams:
            _check_levels(self.bigram_levels, "bigram_levels")
            if len(set(self.bigrams)) != len(self.bigrams):
                raise ValueError("bigrams must be distinct")
            for bg in self.bigrams:
                if len(bg) != 2:
                    raise ValueError(f"bigrams must have exactly two characters, got {bg!r}")
                if bg[0] not in self.alphabet or bg[1] not in self.alphabet:
                    raise ValueError(f"bigram {bg!r} uses characters outside the alphabet")
        elif self.bigram_levels:
            raise ValueError("bigram_levels given but no bigrams")

    @property
    def dimension(self) -> int:
        """Total vector length implied by the layout."""
        dim = len(self.alphabet) * sum(self.unigram_levels)
        dim += len(self.bigrams) * sum(self.bigram_levels)
        return dim

    @property
    def bigram_index(self) -> dict[str, int]:
        return {bg: i for i, bg in enumerate(self.bigrams)}

    def digest(self) -> str:
        """Short stable fingerprint of the layout, for model metadata."""
        canon = "|".join(
            (
                "".join(self.alphabet.symbols),
                ",".join(map(str, self.unigram_levels)),
                ",".join(self.bigrams),
                ",".join(map(str, self.bigram_levels)),
            )
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _check_levels(levels: tuple[int, ...], name: str) -> None:
    for lv in levels:
        if not isinstance(lv, int) or lv < 1:
            raise ValueError(f"{name} must be positive integers, got {lv!r}")
    if tuple(sorted(set(levels))) != levels:
        raise ValueError(f"{name} must be strictly increasing, got {levels}")


def phoc_dimension(config: PhocConfig) -> int:
    """Vector length for ``config``: |alphabet|*sum(levels) + |bigrams|*sum(bigram levels)."""
    return config.dimension


def encode_phoc(transcription: str, config: PhocConfig) -> np.ndarray:
    """Encode a normalized ``transcription`` as a binary attribute vector.

    The half-occupancy test is evaluated in exact integer arithmetic: with
    every interval scaled by n*L, character k at level L occupies
    [k*L, (k+1)*L] and region r occupies [r*n, (r+1)*n], so the bit is set
    iff 2*overlap >= L (unigrams; exact ties included).  Bigrams span two
    characters, [k*L, (k+2)*L], and require overlap >= L.

    Returns a float32 vector of 0.0/1.0 values, laid out level-ascending,
    region-ascending, alphabet-ordered; all unigram blocks precede all
    bigram blocks.
    """
    if not transcription:
        raise ValueError("transcription must be non-empty")
    n = len(transcription)
    alpha = config.alphabet
    a_size = len(alpha)
    char_idx = []
    for ch in transcription:
        ci = alpha.index.get(ch)
        if ci is None:
            raise ValueError(f"character {ch!r} not in alphabet")
        char_idx.append(ci)
    vec = np.zeros(config.dimension, dtype=np.float32)

    offset = 0
    for level in config.unigram_levels:
        for k, ci in enumerate(char_idx):
            c_lo, c_hi = k * level, (k + 1) * level
            for region in range(level):
                ov = min(c_hi, (region + 1) * n) - max(c_lo, region * n)
                if 2 * ov >= level:
                    vec[offset + region * a_size + ci] = 1.0
        offset += level * a_size

    if config.bigrams:
        b_index = config.bigram_index
        b_size = len(config.bigrams)
        for level in config.bigram_levels:
            for k in range(n - 1):
                bi = b_index.get(transcription[k : k + 2])
                if bi is None:
                    continue
                c_lo, c_hi = k * level, (k + 2) * level
                for region in range(level):
                    ov = min(c_hi, (region + 1) * n) - max(c_lo, region * n)
                    if ov >= level:
                        vec[offset + region * b_size + bi] = 1.0
            offset += level * b_size

    return vec
