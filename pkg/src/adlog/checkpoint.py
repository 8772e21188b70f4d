"""Binary model checkpoints.

Layout, all integers little-endian::

    8 bytes   magic b"ADLOGCKP"
    u32       format version (1)
    u32       vocabulary size V
    u32       hidden size H
    V times   u32 byte length + UTF-8 token
    u32       tensor count
    per tensor:
      u16 name length + ASCII name
      u8  ndim, then ndim x u32 dims
      prod(dims) x f64 little-endian, row-major
    u32       metadata length + UTF-8 JSON (training config and resume state)

Tensors appear in the order of ``ModelParams`` fields.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .ingest import Vocabulary
from .seq2seq import ModelParams, Seq2Seq

MAGIC = b"ADLOGCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: Seq2Seq, metadata: dict | None = None) -> bytes:
    p = model.params
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, p.vocab_size, p.hidden_size))
    for tok in model.vocab.itos:
        raw = tok.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    tensors = p.tensors()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[Seq2Seq, dict]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an adlog checkpoint")
    version, vocab_size, hidden = r.unpack("<III")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    itos = []
    for _ in range(vocab_size):
        (n,) = r.unpack("<I")
        itos.append(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("ascii")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if set(tensors) != set(ModelParams.names()):
        raise CheckpointError(f"tensor set mismatch: {sorted(tensors)}")
    (n,) = r.unpack("<I")
    metadata = json.loads(r.take(n).decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    params = ModelParams(**{name: tensors[name] for name in ModelParams.names()})
    if params.hidden_size != hidden or params.vocab_size != vocab_size:
        raise CheckpointError("tensor shapes disagree with the header")
    params.validate()
    return Seq2Seq(params, Vocabulary.from_list(itos)), metadata


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: Seq2Seq, path, metadata: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(model, metadata))


def load(path) -> tuple[Seq2Seq, dict]:
    return loads(Path(path).read_bytes())
