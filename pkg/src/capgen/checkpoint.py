"""CCKP binary checkpoint format, little-endian throughout::

    magic 'CCKP' | u32 version=1
    config: u32 d_img | u32 d_embed | u32 hidden | u32 layers
            u32 vocab_size | u32 n | u8 precision | u8 bidirectional
    u32 tensor count, then per tensor:
            u32 name_len | UTF-8 name | u32 rank | rank * u32 dims
            row-major f32 payload

64-bit parameters are narrowed to f32 on save (lossy by design); loading
widens back to the config's precision. Tensors are written in canonical
order but matched by name on load.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from capgen.errors import FileFormatError
from capgen.model import ModelConfig, ModelParams

CCKP_MAGIC = b"CCKP"
CCKP_VERSION = 1

_CONFIG_STRUCT = struct.Struct("<6IBB")


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> None:
    config = params.config
    config.require_resolved()
    named = params.named_tensors()
    with open(path, "wb") as f:
        f.write(CCKP_MAGIC)
        f.write(struct.pack("<I", CCKP_VERSION))
        f.write(
            _CONFIG_STRUCT.pack(
                config.d_img,
                config.d_embed,
                config.hidden,
                config.layers,
                config.vocab_size,
                config.n,
                config.precision,
                int(config.bidirectional),
            )
        )
        f.write(struct.pack("<I", len(named)))
        for name, arr in named:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, nbytes: int, path, what: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise FileFormatError(f"{path}: truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != CCKP_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {CCKP_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != CCKP_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        fields = _CONFIG_STRUCT.unpack(_read_exact(f, _CONFIG_STRUCT.size, path, "config"))
        d_img, d_embed, hidden, layers, vocab_size, n, precision, bidirectional = fields
        if precision not in (32, 64):
            raise FileFormatError(f"{path}: invalid precision {precision}")
        if bidirectional not in (0, 1):
            raise FileFormatError(f"{path}: invalid bidirectional flag {bidirectional}")
        try:
            config = ModelConfig(
                d_img=d_img,
                vocab_size=vocab_size,
                d_embed=d_embed,
                hidden=hidden,
                layers=layers,
                bidirectional=bool(bidirectional),
                n=n,
                precision=precision,
            )
        except ValueError as exc:
            raise FileFormatError(f"{path}: invalid config: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path, f"tensor {i} name length"))
            name = _read_exact(f, name_len, path, f"tensor {i} name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, path, f"{name} dims"))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * size, path, f"{name} payload")
            if name in tensors:
                raise FileFormatError(f"{path}: duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
        if f.read(1):
            raise FileFormatError(f"{path}: trailing bytes after {count} tensors")
    try:
        return ModelParams.from_tensor_dict(config, tensors)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
