"""Corpus ingestion, next-token sequence expansion, splits, synthetic data.

Captions travel as UTF-8 TSV (``image_id<TAB>caption``, one record per
line). Image embeddings travel in the CEMB binary format, little-endian
throughout::

    magic 'CEMB' | u32 version=1 | u32 count | u32 dim
    then per record: u32 id_len | id_len bytes UTF-8 image id | dim * f32

Each image-caption pair expands into ``n`` training samples: sample ``j``
pairs the first ``j`` caption ids (right-padded with UNK to length ``n``)
with the id at position ``j`` as the prediction target, so sample 0 must
predict the first word from the image embedding alone.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

from capgen.errors import DuplicateIdError, FileFormatError
from capgen.text import UNK_ID

CEMB_MAGIC = b"CEMB"
CEMB_VERSION = 1

R = TypeVar("R")


@dataclass(frozen=True)
class CaptionRecord:
    """An image id and its fixed-length encoded caption."""

    image_id: str
    encoded: tuple[int, ...]


@dataclass(frozen=True)
class ExpandedSample:
    """One expanded training row: a padded prefix and its target id."""

    image_id: str
    prefix: tuple[int, ...]
    target: int


def load_captions(path: str | os.PathLike) -> list[tuple[str, str]]:
    """Read caption TSV records, preserving file order.

    Raises:
        FileFormatError: a non-empty line has no tab or an empty image id.
        DuplicateIdError: the same image id appears twice.
    """
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FileFormatError(f"{path}:{lineno}: expected 'image_id<TAB>caption'")
            image_id, caption = line.split("\t", 1)
            if not image_id:
                raise FileFormatError(f"{path}:{lineno}: empty image id")
            if image_id in seen:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            seen.add(image_id)
            records.append((image_id, caption))
    return records


def _read_exact(f, nbytes: int, path, what: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise FileFormatError(f"{path}: truncated file while reading {what}")
    return data


def save_embeddings(path: str | os.PathLike, embeddings: dict[str, np.ndarray]) -> None:
    """Write embeddings in CEMB format, in dict iteration order.

    Vectors are stored as little-endian f32; all must share one dimension
    and contain only finite values.
    """
    vectors = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in embeddings.items()}
    dims = {v.shape for v in vectors.values()}
    if len(dims) > 1:
        raise ValueError(f"embedding vectors disagree on dimension: {sorted(dims)}")
    dim = next(iter(dims))[0] if dims else 0
    for image_id, vec in vectors.items():
        if vec.ndim != 1:
            raise ValueError(f"embedding for {image_id!r} is not a vector")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"embedding for {image_id!r} has non-finite components")
    with open(path, "wb") as f:
        f.write(CEMB_MAGIC)
        f.write(struct.pack("<III", CEMB_VERSION, len(vectors), dim))
        for image_id, vec in vectors.items():
            encoded = image_id.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(vec.tobytes())


def load_embeddings(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a CEMB file into an ``image_id -> f32 vector`` map.

    The returned dict preserves record order. Raises FileFormatError on a
    bad magic, unsupported version, truncation, trailing bytes, or
    non-finite components, and DuplicateIdError on repeated image ids.
    """
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != CEMB_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {CEMB_MAGIC!r}")
        version, count, dim = struct.unpack("<III", _read_exact(f, 12, path, "header"))
        if version != CEMB_VERSION:
            raise FileFormatError(f"{path}: unsupported CEMB version {version}")
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, path, f"record {i} id length"))
            image_id = _read_exact(f, id_len, path, f"record {i} id").decode("utf-8")
            payload = _read_exact(f, 4 * dim, path, f"record {i} vector")
            vec = np.frombuffer(payload, dtype="<f4").copy()
            if not np.all(np.isfinite(vec)):
                raise FileFormatError(f"{path}: non-finite components in embedding {image_id!r}")
            if image_id in out:
                raise DuplicateIdError(f"{path}: duplicate image id {image_id!r}")
            out[image_id] = vec
        if f.read(1):
            raise FileFormatError(f"{path}: trailing bytes after {count} records")
    return out


def expand_pair(record: CaptionRecord, n: int) -> list[ExpandedSample]:
    """Expand one encoded caption into ``n`` next-token samples.

    Sample ``j`` has prefix ``encoded[:j]`` right-padded with UNK to
    length ``n`` and target ``encoded[j]``.
    """
    if len(record.encoded) != n:
        raise ValueError(
            f"record {record.image_id!r} encodes {len(record.encoded)} ids, expected {n}"
        )
    samples = []
    for j in range(n):
        prefix = record.encoded[:j] + (UNK_ID,) * (n - j)
        samples.append(ExpandedSample(record.image_id, prefix, record.encoded[j]))
    return samples


def split_train_test(records: Sequence[R], test_count: int, seed: int) -> tuple[list[R], list[R]]:
    """Deterministically shuffle and split records.

    The test split takes exactly ``test_count`` records; the two lists
    are disjoint and together exhaust the input.
    """
    if not 0 <= test_count <= len(records):
        raise ValueError(f"test_count {test_count} out of range for {len(records)} records")
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    return shuffled[test_count:], shuffled[:test_count]


def _image_rng(seed: int, image_id: str) -> np.random.Generator:
    # keyed by (seed, image_id) so every image gets its own stable stream
    digest = hashlib.sha256(f"{seed}:{image_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def synth_dataset(
    out_dir: str | os.PathLike,
    num_images: int,
    d_img: int,
    vocab_size: int,
    max_caption_len: int,
    seed: int,
) -> tuple[Path, Path]:
    """Generate a deterministic synthetic embeddings + captions pair.

    Embedding components are uniform on [-1, 1] from a generator keyed by
    ``(seed, image_id)``; each caption is drawn from the same per-image
    stream over the alphabet ``w0..w{vocab_size-1}``, so captions are a
    fixed, learnable function of their embedding. Caption lengths range
    from ``max(1, (max_caption_len + 1) // 2)`` to ``max_caption_len``.

    Returns ``(embeddings_path, captions_path)``.
    """
    if min(num_images, d_img, vocab_size, max_caption_len) < 1:
        raise ValueError("num_images, d_img, vocab_size and max_caption_len must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    min_len = max(1, (max_caption_len + 1) // 2)

    embeddings: dict[str, np.ndarray] = {}
    captions: list[tuple[str, str]] = []
    for k in range(num_images):
        image_id = f"img{k:05d}"
        rng = _image_rng(seed, image_id)
        embeddings[image_id] = rng.uniform(-1.0, 1.0, d_img).astype("<f4")
        length = int(rng.integers(min_len, max_caption_len + 1))
        words = rng.integers(0, vocab_size, size=length)
        captions.append((image_id, " ".join(f"w{int(w)}" for w in words)))

    embeddings_path = out_dir / "embeddings.cemb"
    captions_path = out_dir / "captions.tsv"
    save_embeddings(embeddings_path, embeddings)
    with open(captions_path, "w", encoding="utf-8", newline="\n") as f:
        for image_id, caption in captions:
            f.write(f"{image_id}\t{caption}\n")
    return embeddings_path, captions_path
