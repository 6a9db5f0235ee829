"""BLEU scoring: clipped n-gram precisions with a brevity penalty.

Scores use uniform weights ``1/max_n`` over n-gram orders ``1..max_n``.
Without smoothing, any order with zero matches (including orders longer
than the candidate) zeroes the whole score; the optional add-one
smoothing adds 1 to matched and total for orders >= 2. Reported
precision counts are always the raw, unsmoothed ones.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

Tokens = Sequence[str]


@dataclass(frozen=True)
class BleuBreakdown:
    """Score plus the pieces it was assembled from."""

    precisions: tuple[tuple[int, int], ...]  # (matched, total) per order
    brevity_penalty: float
    score: float
    candidate_len: int
    effective_ref_len: int


@dataclass(frozen=True)
class CorpusBleu:
    """Corpus-pooled breakdown plus the mean sentence score on 0-100."""

    pooled: BleuBreakdown
    mean_sentence_x100: float


def ngram_counts(tokens: Tokens, k: int) -> Counter[tuple[str, ...]]:
    """Multiset of contiguous k-grams; empty when the input is shorter than k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def clipped_precision(candidate: Tokens, references: Sequence[Tokens], k: int) -> tuple[int, int]:
    """Matched and total candidate k-grams, clipping each k-gram's count
    at its maximum count in any single reference."""
    total = max(0, len(candidate) - k + 1)
    if total == 0:
        return 0, 0
    counts = ngram_counts(candidate, k)
    max_ref: Counter[tuple[str, ...]] = Counter()
    for ref in references:
        for gram, c in ngram_counts(ref, k).items():
            if c > max_ref[gram]:
                max_ref[gram] = c
    matched = sum(min(c, max_ref[gram]) for gram, c in counts.items())
    return matched, total


def _effective_ref_len(candidate_len: int, references: Sequence[Tokens]) -> int:
    # closest reference length; ties break toward the shorter reference
    return min((len(r) for r in references), key=lambda L: (abs(L - candidate_len), L))


def sentence_bleu(
    candidate: Tokens,
    references: Sequence[Tokens],
    max_n: int = 4,
    smoothing: bool = False,
) -> BleuBreakdown:
    """Score one candidate against one or more references.

    Empty references are ignored; at least one non-empty reference is
    required. An empty candidate is the documented degenerate case:
    score 0 with brevity penalty defined as 0.
    """
    references = [r for r in references if len(r) > 0]
    if not references:
        raise ValueError("at least one non-empty reference is required")
    precisions = tuple(clipped_precision(candidate, references, k) for k in range(1, max_n + 1))
    c = len(candidate)
    r = _effective_ref_len(c, references)
    if c == 0:
        return BleuBreakdown(precisions, 0.0, 0.0, 0, r)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    score = bp * _geometric_precision(precisions, smoothing)
    return BleuBreakdown(precisions, bp, score, c, r)


def _geometric_precision(precisions: Sequence[tuple[int, int]], smoothing: bool) -> float:
    log_sum = 0.0
    for k, (matched, total) in enumerate(precisions, start=1):
        if smoothing and k >= 2:
            matched, total = matched + 1, total + 1
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total)
    return math.exp(log_sum / len(precisions))


def corpus_bleu(
    pairs: Sequence[tuple[Tokens, Sequence[Tokens]]],
    max_n: int = 4,
    smoothing: bool = False,
) -> CorpusBleu:
    """Pool matched/total counts and lengths over the corpus, and also
    average the per-sentence scores (reported on a 0-100 scale)."""
    if not pairs:
        raise ValueError("at least one (candidate, references) pair is required")
    pooled = [[0, 0] for _ in range(max_n)]
    c_total = 0
    r_total = 0
    sentence_sum = 0.0
    for candidate, references in pairs:
        breakdown = sentence_bleu(candidate, references, max_n=max_n, smoothing=smoothing)
        sentence_sum += breakdown.score
        for k, (matched, total) in enumerate(breakdown.precisions):
            pooled[k][0] += matched
            pooled[k][1] += total
        c_total += breakdown.candidate_len
        r_total += breakdown.effective_ref_len
    precisions = tuple((m, t) for m, t in pooled)
    if c_total == 0:
        corpus = BleuBreakdown(precisions, 0.0, 0.0, 0, r_total)
    else:
        bp = 1.0 if c_total > r_total else math.exp(1.0 - r_total / c_total)
        corpus = BleuBreakdown(
            precisions, bp, bp * _geometric_precision(precisions, smoothing), c_total, r_total
        )
    return CorpusBleu(corpus, 100.0 * sentence_sum / len(pairs))
