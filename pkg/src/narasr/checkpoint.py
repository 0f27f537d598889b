"""Single-file checkpoint format.

Layout::

    8 bytes   magic b"NARCKPT1"
    8 bytes   header length N, unsigned little-endian
    N bytes   UTF-8 JSON manifest (sorted keys, compact separators)
    rest      tensors as little-endian float64, in manifest order

The manifest records the model config, the vocabulary (tokens and sha256)
and, per tensor, its name, shape, byte offset into the data section and
value count. Saving is deterministic, so save -> load -> save reproduces
the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, FormatError
from .model import ModelConfig, ModelParams, _param_shapes
from .vocab import Vocabulary

MAGIC = b"NARCKPT1"
FORMAT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name].data, dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "narasr-checkpoint",
        "version": FORMAT_VERSION,
        "model": params.config.to_dict(),
        "vocab": {"tokens": list(params.vocab.tokens), "sha256": params.vocab.digest()},
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def _field(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"checkpoint manifest: missing field '{where}{key}'")
    return obj[key]


def parse_checkpoint(blob: bytes, expected_vocab: Vocabulary | None = None) -> ModelParams:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError("checkpoint: bad magic (not a narasr checkpoint)")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise FormatError("checkpoint: header length runs past end of file")
    try:
        manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint: manifest is not valid JSON ({exc})") from exc

    if _field(manifest, "format", "") != "narasr-checkpoint":
        raise FormatError("checkpoint manifest: field 'format' has unexpected value")
    if _field(manifest, "version", "") != FORMAT_VERSION:
        raise FormatError(f"checkpoint manifest: unsupported 'version' {manifest['version']}")
    vocab_entry = _field(manifest, "vocab", "")
    tokens = _field(vocab_entry, "tokens", "vocab.")
    digest = _field(vocab_entry, "sha256", "vocab.")
    vocab = Vocabulary(tuple(tokens))
    if vocab.digest() != digest:
        raise FormatError("checkpoint manifest: field 'vocab.sha256' does not match 'vocab.tokens'")
    if expected_vocab is not None and expected_vocab.digest() != digest:
        raise FormatError("checkpoint manifest: field 'vocab.sha256' differs from the expected "
                          "vocabulary; refusing to load")
    try:
        config = ModelConfig(**_field(manifest, "model", ""))
    except TypeError as exc:
        raise FormatError(f"checkpoint manifest: field 'model' is malformed ({exc})") from exc

    data = memoryview(blob)[16 + n :]
    expected = _param_shapes(config)
    tensors = {}
    end = 0
    for i, entry in enumerate(_field(manifest, "tensors", "")):
        where = f"tensors[{i}]."
        name = _field(entry, "name", where)
        shape = tuple(_field(entry, "shape", where))
        offset = _field(entry, "offset", where)
        count = _field(entry, "count", where)
        if name not in expected:
            raise FormatError(f"checkpoint manifest: field '{where}name' names unknown tensor {name!r}")
        if shape != expected[name]:
            raise FormatError(f"checkpoint manifest: field '{where}shape' of {name!r} is {list(shape)}, "
                              f"model config implies {list(expected[name])}")
        if count != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"checkpoint manifest: field '{where}count' of {name!r} is {count}, "
                              f"shape implies {int(np.prod(shape))}")
        if offset != end or offset + 8 * count > len(data):
            raise FormatError(f"checkpoint manifest: field '{where}offset' of {name!r} is inconsistent "
                              f"with the data section")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
        end = offset + 8 * count
    if end != len(data):
        raise FormatError(f"checkpoint: data section has {len(data) - end} trailing bytes")
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise FormatError(f"checkpoint manifest: field 'tensors' lacks {missing}")
    try:
        return ModelParams(config, vocab, tensors)
    except DimensionError as exc:
        raise FormatError(f"checkpoint: {exc}") from exc


def load_checkpoint(path, expected_vocab: Vocabulary | None = None) -> ModelParams:
    """Load and validate; ``expected_vocab`` must match the stored vocabulary hash."""
    return parse_checkpoint(Path(path).read_bytes(), expected_vocab)
