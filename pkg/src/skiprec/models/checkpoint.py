"""Checkpoint container.

Layout::

    b"SKIPREC-CKPT/1\\n"
    uint64 little-endian: header length in bytes
    header: UTF-8 JSON (sorted keys) with
        kind        "sequential" or "baseline"
        config      model / baseline configuration
        vocab_hash  sha256 of the vocabulary the model was trained on
        meta        free-form run metadata (must be deterministic)
        tensors     [{"name", "shape", "offset"}] in name order
    payload: raw little-endian float64 tensors, C order, at the given offsets
             relative to the payload start
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

CKPT_MAGIC = b"SKIPREC-CKPT/1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    vocab_hash: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            raw = arr.tobytes()
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"kind": self.kind, "config": self.config, "vocab_hash": self.vocab_hash,
             "meta": self.meta, "tensors": index},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        return CKPT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(CKPT_MAGIC):
            raise CheckpointError("not a SKIPREC-CKPT/1 file")
        pos = len(CKPT_MAGIC)
        (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        payload = memoryview(data)[pos + hlen:]
        tensors = {}
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["offset"]
            arr = np.frombuffer(payload[start:start + 8 * n], dtype="<f8")
            tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        return cls(header["kind"], header["config"], header["vocab_hash"], tensors,
                   header.get("meta", {}))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
