"""FSCK checkpoint format.

Little-endian layout::

    b"FSCK" | version u32 | header_len u32 | header (UTF-8 JSON)
    then, for each parameter in header["num_params"]:
        name_len u32 | name (UTF-8) | rank u32 | rank x extent u32 | float64 data

The JSON header holds the model config, the training-step counter and the
data schema ``{"n", "d"}``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ConfigError, CorruptFileError, ShapeMismatchError, VersionMismatchError
from .model import FlowScan, FlowScanConfig

MAGIC = b"FSCK"
VERSION = 1


def save(model, path, step=None, schema=None):
    """Write ``model`` atomically (temp file + rename)."""
    params = list(model.store.items())
    header = {
        "config": model.config.to_dict(),
        "step": int(model.store.step if step is None else step),
        "schema": schema or {"n": model.config.n, "d": model.config.d},
        "num_params": len(params),
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    for name, p in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, k):
        if self.pos + k > len(self.buf):
            raise CorruptFileError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + k]
        self.pos += k
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load(path):
    """Rebuild a model from ``path``. Nothing is returned unless every
    parameter was read and matched the config's shapes."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.take(4) != MAGIC:
        raise CorruptFileError(f"{path}: not an FSCK checkpoint")
    version = cur.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(cur.take(cur.u32()).decode("utf-8"))
        config = FlowScanConfig.from_dict(header["config"])
        count = int(header["num_params"])
    except (ValueError, KeyError, TypeError) as err:
        if isinstance(err, ConfigError):
            raise ShapeMismatchError(f"{path}: stored config is invalid: {err}") from None
        raise CorruptFileError(f"{path}: unreadable header ({err})") from None

    values = {}
    for _ in range(count):
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        shape = tuple(cur.u32(rank)) if rank > 1 else ((cur.u32(),) if rank == 1 else ())
        size = int(np.prod(shape)) if shape else 1
        values[name] = np.frombuffer(cur.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if cur.pos != len(cur.buf):
        raise CorruptFileError(f"{path}: unexpected trailing bytes")

    model = FlowScan(config)
    expected = {k: p.data.shape for k, p in model.store.items()}
    got = {k: v.shape for k, v in values.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise ShapeMismatchError(
            f"{path}: parameters do not match config (missing={missing[:5]}, extra={extra[:5]}, shape={wrong[:5]})")
    model.store.load_state_dict(values)
    model.store.step = int(header.get("step", 0))
    model.schema = header.get("schema")
    return model
