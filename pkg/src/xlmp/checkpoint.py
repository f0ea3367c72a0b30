"""Binary named-tensor checkpoints.

Layout::

    b"XLMP1" | u64 little-endian header length | UTF-8 JSON header | payload

The header carries the model config, free-form metadata and a tensor index
(name, shape, dtype, byte offset into the payload). Tensors are stored as
little-endian float32, row-major. There is no checksum: a flipped payload
byte loads fine and simply changes that tensor.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, EncoderModel

MAGIC = b"XLMP1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model(self, expected: EncoderConfig | None = None) -> EncoderModel:
        if expected is not None and expected != self.config:
            diff = sorted(k for k, v in expected.to_dict().items() if self.config.to_dict()[k] != v)
            raise CheckpointError(f"checkpoint config differs from expected in: {diff}")
        with_pool = "prompt.keys" in self.tensors
        model = EncoderModel(self.config, with_pool=with_pool)
        names = set(model.parameters())
        model.load_arrays({k: v for k, v in self.tensors.items() if k in names})
        return model

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path: str | os.PathLike, model: EncoderModel, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {name: arr for name, arr in model.named_arrays()}
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor {name!r} collides with a model parameter")
        tensors[name] = arr
    write_checkpoint(path, Checkpoint(model.config, tensors, dict(meta or {})))


def write_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config.to_dict(), "meta": ckpt.meta, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an XLMP1 checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[pos: pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos: pos + hlen].decode("utf-8"))
        config = EncoderConfig.from_dict(header["config"])
        index = header["tensors"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    payload = memoryview(blob)[pos + hlen:]
    tensors = {}
    for entry in index:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        start = entry["offset"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(payload[start: start + n], dtype=_DTYPE).astype(np.float32).reshape(shape)
    return Checkpoint(config, tensors, meta)
