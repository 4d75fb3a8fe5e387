"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic b"VTOKCKPT"
    u32       format version
    u32, ...  metadata length, UTF-8 JSON (model config, stage/step, rng)
    u32       tensor count
    per tensor:
        u32, ...  name length, UTF-8 name
        u8        group tag (index into model.GROUPS)
        u32       rank
        u64[rank] dims
        f32[...]  payload
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError
from .model import GROUPS, ModelConfig, ParamSet, VisionLanguageModel

MAGIC = b"VTOKCKPT"
VERSION = 1


def save_checkpoint(path, model: VisionLanguageModel, meta: dict | None = None):
    """Write atomically (temp file + rename)."""
    meta = dict(meta or {})
    meta["model"] = model.config.to_dict()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw,
                  struct.pack("<B", GROUPS.index(model.params.groups[name])),
                  struct.pack("<I", t.ndim), struct.pack(f"<{t.ndim}Q", *t.shape),
                  np.ascontiguousarray(t.data, dtype="<f4").tobytes()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple:
    """Returns ``(model, meta)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    config = ModelConfig.from_dict(meta.pop("model"))
    (count,) = r.unpack("<I")
    params = ParamSet()
    dt = T.default_dtype()
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        (tag,) = r.unpack("<B")
        if tag >= len(GROUPS):
            raise CheckpointError(f"{path}: unknown group tag {tag} for {name}")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        params.add(name, GROUPS[tag], data.astype(dt))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return VisionLanguageModel(config, params), meta
