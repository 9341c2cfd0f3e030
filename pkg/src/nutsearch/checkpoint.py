"""Binary model checkpoints.

Layout, all integers little-endian:

    8-byte ASCII magic "NUTSCKPT"
    uint32 format version (currently 1)
    uint32 header byte length, then that many bytes of UTF-8 JSON
    per tensor, in the header's listed order:
        uint16 name byte length, then the UTF-8 name
        uint8 rank, then rank x uint32 dims
        row-major IEEE-754 float32 data

The JSON header records the model kind, its hyperparameters, the full
vocabulary, the creation seed, the resolved config hash, and the tensor
name list. Weights are stored at 32-bit and widened to 64-bit on load, so
saving a freshly loaded model reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (CheckpointConsistencyError, CheckpointMagicError,
                     CheckpointTruncatedError, CheckpointVersionError,
                     ContractViolation)
from .gradcore import Tensor
from .models import MODEL_KINDS, model_from_parts
from .textdata import Vocab

MAGIC = b"NUTSCKPT"
VERSION = 1


def save_checkpoint(model, path, seed: int = 0, config_hash: str = "") -> None:
    """Write `model` to `path` in the binary format above."""
    names = sorted(model.weights)
    header = {
        "kind": model.kind,
        "hyperparams": model.hyperparams(),
        "vocab": model.vocab.to_jsonable(),
        "seed": int(seed),
        "config_hash": config_hash,
        "tensors": names,
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    for name in names:
        data = model.weights[name].data
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc))
        out += enc
        out += struct.pack("<B", data.ndim)
        for d in data.shape:
            out += struct.pack("<I", d)
        out += np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"file ended inside {what} ({self.pos + n} bytes needed, "
                f"{len(self.buf)} present)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    """Read a checkpoint and rebuild the model it describes.

    Returns (model, header) where header is the parsed JSON dict."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, supported: {VERSION}")
    hlen = r.u32("header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointConsistencyError(f"{path}: bad header: {err}") from err
    for key in ("kind", "hyperparams", "vocab", "seed", "config_hash",
                "tensors"):
        if key not in header:
            raise CheckpointConsistencyError(f"{path}: header lacks '{key}'")
    kind = header["kind"]
    if kind not in MODEL_KINDS:
        raise CheckpointConsistencyError(f"{path}: unknown model kind {kind!r}")

    weights: dict[str, Tensor] = {}
    for expect in header["tensors"]:
        nlen = r.u16("tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        if name != expect:
            raise CheckpointConsistencyError(
                f"{path}: tensor order mismatch: header says {expect!r}, "
                f"file has {name!r}")
        rank = r.u8("tensor rank")
        dims = tuple(r.u32("tensor dims") for _ in range(rank))
        count = 1
        for d in dims:
            count *= d
        raw = r.take(4 * count, f"tensor data for {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
        weights[name] = Tensor(arr)
    if r.pos != len(buf):
        raise CheckpointConsistencyError(
            f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")

    try:
        vocab = Vocab.from_jsonable(header["vocab"])
    except (KeyError, TypeError, ContractViolation) as err:
        raise CheckpointConsistencyError(
            f"{path}: bad vocab payload: {err}") from err
    cls = MODEL_KINDS[kind]
    for name in cls.vocab_sized:
        if name not in weights:
            raise CheckpointConsistencyError(
                f"{path}: missing embedding tensor {name!r}")
        if weights[name].data.shape[0] != len(vocab):
            raise CheckpointConsistencyError(
                f"{path}: vocab has {len(vocab)} entries but {name!r} has "
                f"{weights[name].data.shape[0]} rows")
    try:
        model = model_from_parts(kind, header["hyperparams"], vocab, weights)
    except (TypeError, ContractViolation) as err:
        raise CheckpointConsistencyError(
            f"{path}: cannot rebuild model: {err}") from err
    return model, header
