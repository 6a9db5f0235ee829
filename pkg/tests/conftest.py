"""Shared fixtures; the expensive overfit training run happens once per session."""

from __future__ import annotations

import json
import time
from pathlib import Path

import pytest

from capgen.cli import main

# fixture knobs for the memorization run: 5 images, captions of 4..7 tokens
# over an 18-token alphabet, pure SGD at lr 0.1
OVERFIT_SYNTH = ["--images", "5", "--dim", "32", "--vocab", "18", "--max-caption-len", "7", "--seed", "11"]
OVERFIT_TRAIN = [
    "--d-embed", "48", "--hidden", "48", "--n", "7",
    "--epochs", "300", "--batch-size", "1",
    "--learning-rate", "0.1", "--shuffle-seed", "3", "--log-every", "0",
]


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory) -> dict:
    """Train once on the 5-pair synthetic corpus; reused by several tests."""
    root = tmp_path_factory.mktemp("overfit")
    data = root / "data"
    checkpoint = root / "model.cckp"
    report_path = root / "report.jsonl"
    started = time.perf_counter()
    assert main(["synth", "--out-dir", str(data), *OVERFIT_SYNTH]) == 0
    assert main(
        [
            "train",
            "--captions", str(data / "captions.tsv"),
            "--embeddings", str(data / "embeddings.cemb"),
            "--checkpoint-out", str(checkpoint),
            "--report-out", str(report_path),
            *OVERFIT_TRAIN,
        ]
    ) == 0
    seconds = time.perf_counter() - started
    records = [json.loads(line) for line in report_path.read_text(encoding="utf-8").splitlines()]
    return {
        "captions": data / "captions.tsv",
        "embeddings": data / "embeddings.cemb",
        "checkpoint": checkpoint,
        "vocab": Path(str(checkpoint) + ".vocab"),
        "report_path": report_path,
        "records": records,
        "seconds": seconds,
    }
