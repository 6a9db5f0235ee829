"""Checkpoint evaluation: greedy-decode a test set and score it with BLEU.

Every test image is decoded and compared against its single reference
caption. The report carries both the corpus-pooled BLEU (0-1) and the
mean per-sentence BLEU on a 0-100 scale, since a low-scoring average is
only meaningful when its aggregation is stated; generated captions are
kept alongside references for qualitative reading.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from capgen.bleu import CorpusBleu, corpus_bleu, sentence_bleu
from capgen.checkpoint import load_checkpoint
from capgen.data import load_captions, load_embeddings
from capgen.decode import greedy_caption
from capgen.errors import IntegrityError
from capgen.text import load_vocabulary, normalize_and_tokenize
from capgen.train import default_vocab_path


@dataclass(frozen=True)
class ImageEval:
    image_id: str
    reference: tuple[str, ...]
    generated: tuple[str, ...]
    sentence_bleu: float


@dataclass(frozen=True)
class EvalReport:
    corpus: CorpusBleu
    per_image: tuple[ImageEval, ...]


def evaluate(
    checkpoint_path: str | os.PathLike,
    captions_path: str | os.PathLike,
    embeddings_path: str | os.PathLike,
    out_report: str | os.PathLike | None = None,
    vocab_path: str | os.PathLike | None = None,
    smoothing: bool = False,
) -> EvalReport:
    """Decode every test image and score against its reference caption.

    The vocabulary defaults to the training sidecar next to the
    checkpoint. References are the full tokenized captions (no
    truncation). Raises IntegrityError when a caption's image id has no
    embedding.
    """
    params = load_checkpoint(checkpoint_path)
    vocab = load_vocabulary(vocab_path if vocab_path is not None else default_vocab_path(checkpoint_path))
    pairs = load_captions(captions_path)
    embeddings = load_embeddings(embeddings_path)

    per_image = []
    for image_id, text in pairs:
        if image_id not in embeddings:
            raise IntegrityError(f"caption image id {image_id!r} has no embedding")
        reference = tuple(normalize_and_tokenize(text))
        generated = greedy_caption(params, vocab, embeddings[image_id]).tokens
        score = sentence_bleu(generated, [reference], smoothing=smoothing).score
        per_image.append(ImageEval(image_id, reference, generated, score))

    corpus = corpus_bleu(
        [(e.generated, [e.reference]) for e in per_image], smoothing=smoothing
    )
    report = EvalReport(corpus, tuple(per_image))
    if out_report is not None:
        write_eval_report(report, out_report)
    return report


def write_eval_report(report: EvalReport, path: str | os.PathLike) -> None:
    payload = {
        "corpus_bleu": report.corpus.pooled.score,
        "mean_sentence_bleu_x100": report.corpus.mean_sentence_x100,
        "per_image": [
            {
                "id": e.image_id,
                "reference": " ".join(e.reference),
                "generated": " ".join(e.generated),
                "sentence_bleu": e.sentence_bleu,
            }
            for e in report.per_image
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
        f.write("\n")
