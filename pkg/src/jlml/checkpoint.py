"""Binary checkpoint format.

Layout (little-endian)::

    b"JLMC"  u16 version
    u32 config length, UTF-8 ``key=value`` lines
    repeated: u16 name length, name, u8 rank, u32 dims[rank], float32 data

The config block carries the :class:`ModelConfig` keys plus optional
provenance keys containing a dot (``train.base_lr=...``), which the loader
hands back untouched in ``model.meta``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .model import JlmlModel, ModelConfig, buffer_shapes, parameter_shapes
from .tensor import Tensor

MAGIC = b"JLMC"
VERSION = 1


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


def encode_kv(kv: dict[str, str]) -> bytes:
    lines = []
    for k, v in kv.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"config entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def decode_kv(blob: bytes) -> dict[str, str]:
    kv = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line {line!r}")
        kv[key.strip()] = value.strip()
    return kv


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(model: JlmlModel, meta: dict[str, str] | None = None) -> bytes:
    kv = dict(model.config.to_kv())
    extra = dict(getattr(model, "meta", {}) or {})
    extra.update(meta or {})
    for k, v in extra.items():
        if "." not in k:
            raise ValueError(f"provenance key {k!r} must be namespaced with a dot")
        kv[k] = str(v)
    block = encode_kv(kv)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    for name, p in model.params.items():
        _write_record(buf, name, p.data)
    for name, arr in model.buffers.items():
        _write_record(buf, name, arr)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def loads(data: bytes) -> JlmlModel:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic; not a JLML checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    kv = decode_kv(r.take(n))
    meta = {k: v for k, v in kv.items() if "." in k}
    cfg = ModelConfig.from_kv({k: v for k, v in kv.items() if "." not in k})

    arrays: dict[str, np.ndarray] = {}
    while not r.done:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if name in arrays:
            raise FormatError(f"duplicate record {name!r}")
        arrays[name] = arr

    want = {**parameter_shapes(cfg), **buffer_shapes(cfg)}
    missing = set(want) - set(arrays)
    extra = set(arrays) - set(want)
    if missing or extra:
        raise FormatError(f"records disagree with config: missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]}")
    for name, shape in want.items():
        if arrays[name].shape != tuple(shape):
            raise FormatError(f"record {name!r} has shape {arrays[name].shape}, config expects {shape}")

    params = {k: Tensor(arrays[k], requires_grad=True) for k in parameter_shapes(cfg)}
    buffers = {k: arrays[k].copy() for k in buffer_shapes(cfg)}
    model = JlmlModel(cfg, params, buffers)
    model.meta = meta
    return model


def save_checkpoint(model: JlmlModel, path, meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(model, meta))


def load_checkpoint(path) -> JlmlModel:
    return loads(Path(path).read_bytes())
