"""Caption text handling: tokenization, vocabulary, fixed-length encoding.

Tokens are NFC-normalized, whitespace-free strings. A vocabulary maps
tokens to contiguous integer ids, with id 0 permanently reserved for the
unknown token ``<unk>``, which also serves as right-padding and as the
end-of-output marker when decoding generated id sequences.
"""

from __future__ import annotations

import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from capgen.errors import FileFormatError

UNK_TOKEN = "<unk>"
UNK_ID = 0


def normalize_and_tokenize(raw: str) -> list[str]:
    """NFC-normalize ``raw`` and split it on runs of Unicode whitespace.

    Empty pieces are dropped and order is preserved, so the result is a
    list of non-empty, whitespace-free, NFC-normalized tokens.
    """
    return unicodedata.normalize("NFC", raw).split()


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between token strings and contiguous ids ``0..size-1``.

    ``entries[0]`` is always ``<unk>``; ``index`` is derived from
    ``entries`` at construction and the instance is immutable after that.
    """

    entries: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.entries or self.entries[0] != UNK_TOKEN:
            raise ValueError(f"vocabulary must start with {UNK_TOKEN!r} at id 0")
        index = {}
        for i, token in enumerate(self.entries):
            if i > 0 and (not token or any(ch.isspace() for ch in token)):
                raise ValueError(f"invalid token at id {i}: {token!r}")
            if token in index:
                raise ValueError(f"duplicate token {token!r}")
            index[token] = i
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.entries)

    def id_of(self, token: str) -> int:
        """Id of ``token``, or the UNK id if it is out of vocabulary."""
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ValueError(f"token id {token_id} out of range for vocabulary of size {self.size}")
        return self.entries[token_id]


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from tokenized captions.

    Tokens with corpus frequency >= ``min_count`` are kept, ordered by
    descending frequency with ties broken by ascending code-point order,
    so identical corpora always yield identical id assignments. ``<unk>``
    sits at id 0 regardless of whether it occurs in the corpus.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq = Counter()
    for tokens in corpus:
        freq.update(tokens)
    freq.pop(UNK_TOKEN, None)  # reserved; already holds id 0
    kept = sorted(
        (t for t, c in freq.items() if c >= min_count),
        key=lambda t: (-freq[t], t),
    )
    return Vocabulary((UNK_TOKEN, *kept))


def encode(vocab: Vocabulary, tokens: Sequence[str], n: int) -> tuple[int, ...]:
    """Encode ``tokens`` as exactly ``n`` ids.

    Out-of-vocabulary tokens map to the UNK id; captions longer than ``n``
    keep their first ``n`` tokens, shorter ones are right-padded with UNK.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ids = [vocab.id_of(t) for t in tokens[:n]]
    ids.extend([UNK_ID] * (n - len(ids)))
    return tuple(ids)


def decode_ids(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    """Map ids back to tokens, truncating at the first UNK.

    All ids are range-checked before truncation; the result never
    contains the UNK token.
    """
    for i in ids:
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} out of range for vocabulary of size {vocab.size}")
    out = []
    for i in ids:
        if i == UNK_ID:
            break
        out.append(vocab.entries[i])
    return out


@dataclass(frozen=True)
class CorpusStats:
    unique_tokens: int
    total_tokens: int
    length_histogram: dict[int, int]


def corpus_stats(corpus: Iterable[Sequence[str]]) -> CorpusStats:
    """Count distinct and total tokens and the caption-length histogram.

    Surface forms count separately: no stemming or affix folding is
    applied, so e.g. inflected variants of one root are distinct tokens.
    """
    seen: set[str] = set()
    total = 0
    histogram: Counter[int] = Counter()
    for tokens in corpus:
        seen.update(tokens)
        total += len(tokens)
        histogram[len(tokens)] += 1
    return CorpusStats(len(seen), total, dict(histogram))


def save_vocabulary(vocab: Vocabulary, path: str | os.PathLike) -> None:
    """Write one token per line; the line number is the token id."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for token in vocab.entries:
            f.write(token + "\n")


def load_vocabulary(path: str | os.PathLike) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        entries = f.read().splitlines()
    if not entries:
        raise FileFormatError(f"{path}: empty vocabulary file")
    try:
        return Vocabulary(tuple(entries))
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
