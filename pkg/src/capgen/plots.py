"""Figure rendering for the report paths (training loss, BLEU spread).

matplotlib is imported lazily with the Agg backend so commands that never
render stay light and everything works headless.
"""

from __future__ import annotations

import os

from capgen.evaluate import EvalReport
from capgen.train import TrainingReport


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_loss_curve(report: TrainingReport, path: str | os.PathLike) -> None:
    """Line plot of mean loss per epoch next to the JSONL report."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r.epoch for r in report.records]
    losses = [r.mean_loss for r in report.records]
    ax.plot(epochs, losses, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean cross-entropy loss")
    ax.set_title(f"training loss ({report.samples_per_epoch} samples/epoch)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bleu_histogram(report: EvalReport, path: str | os.PathLike) -> None:
    """Histogram of per-image sentence BLEU next to the JSON report."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    scores = [e.sentence_bleu for e in report.per_image]
    ax.hist(scores, bins=20, range=(0.0, 1.0), edgecolor="black", alpha=0.8)
    ax.set_xlabel("sentence BLEU")
    ax.set_ylabel("images")
    ax.set_title(
        f"corpus BLEU {report.corpus.pooled.score:.4f}, "
        f"mean sentence BLEU x100 {report.corpus.mean_sentence_x100:.2f}"
    )
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
