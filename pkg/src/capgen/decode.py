"""Greedy one-word-at-a-time caption generation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from capgen.model import ModelParams, SequenceInput, forward
from capgen.text import UNK_ID, Vocabulary


class StopReason(Enum):
    UNK_EMITTED = "unk_emitted"
    LENGTH_LIMIT = "length_limit"


@dataclass(frozen=True)
class GeneratedCaption:
    """A generated token sequence; never contains UNK, never exceeds n."""

    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    stopped_by: StopReason

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def greedy_caption(
    params: ModelParams,
    vocab: Vocabulary,
    image_vec: np.ndarray,
    n: int | None = None,
) -> GeneratedCaption:
    """Generate a caption by repeated argmax next-token prediction.

    The prefix starts all-UNK; at each step the highest logit wins (ties
    break toward the lowest id, so all-equal logits stop immediately on
    UNK). Emitting UNK ends the caption, mirroring how padded positions
    were trained; otherwise generation runs to the length limit.
    """
    config = params.config
    config.require_resolved()
    if vocab.size != config.vocab_size:
        raise ValueError(
            f"vocabulary has {vocab.size} entries but the model expects {config.vocab_size}"
        )
    limit = config.n if n is None else n
    if not 1 <= limit <= config.n:
        raise ValueError(f"n must be in 1..{config.n}, got {limit}")

    prefix = [UNK_ID] * config.n
    chosen: list[int] = []
    stopped_by = StopReason.LENGTH_LIMIT
    for k in range(limit):
        logits = forward(params, SequenceInput(image_vec, tuple(prefix)))
        next_id = int(np.argmax(logits))  # first max -> lowest id on ties
        if next_id == UNK_ID:
            stopped_by = StopReason.UNK_EMITTED
            break
        prefix[k] = next_id
        chosen.append(next_id)
    tokens = tuple(vocab.entries[i] for i in chosen)
    return GeneratedCaption(tokens, tuple(chosen), stopped_by)
