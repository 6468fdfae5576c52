"""Flat binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"CPACCKPT"
    version    u32
    record     u64 length + UTF-8 JSON (model config, kind, buffer names, extras)
    count      u32
    count x    u32 name length, name, u32 rank, rank x u64 dims, <f8 data

Tensors are written in declaration order; a CAAM checkpoint is the CPAC
extractor followed by the two heads.  Reading back yields bit-identical arrays.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .model import ConfigurationError, CpacConfig, CpacParams, ParamSet

MAGIC = b"CPACCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def _write_params(fh, params: ParamSet) -> None:
    fh.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.tobytes())


def to_bytes(params: ParamSet, extra: dict | None = None) -> bytes:
    from .caam import CaamParams

    kind = "caam" if isinstance(params, CaamParams) else "cpac"
    record = {
        "kind": kind,
        "model": params.config.to_dict(),
        "buffers": [n for n in params.names() if params.is_buffer(n)],
        "extra": extra or {},
    }
    if kind == "caam":
        record["grl_lambda"] = params.grl_lambda
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    _write_params(fh, params)
    return fh.getvalue()


def save_checkpoint(path: str | os.PathLike, params: ParamSet, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params, extra))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes, source: str = "<bytes>"):
    """Inverse of :func:`to_bytes`: ``(params, extra)``."""
    r = _Reader(buf, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    (n,) = r.unpack("<Q")
    try:
        record = json.loads(r.take(n).decode("utf-8"))
        config = CpacConfig.from_dict(record["model"])
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointError(f"{source}: bad config record ({exc})") from None
    buffers = set(record.get("buffers", []))
    tensors = []
    (count,) = r.unpack("<I")
    for _ in range(count):
        (length,) = r.unpack("<I")
        name = r.take(length).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors.append((name, data))
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes")

    psi = CpacParams(config)
    heads = []
    for name, data in tensors:
        if name.startswith(("head_f.", "head_adv.")):
            heads.append((name, data))
        else:
            psi.add(name, data, buffer=name in buffers)
    if record["kind"] == "caam":
        from .caam import CaamParams

        params = CaamParams(psi, record.get("grl_lambda", 1.0))
        for name, data in heads:
            params.add(name, data)
    else:
        if heads:
            raise CheckpointError(f"{source}: CPAC checkpoint carries head tensors")
        params = psi
    return params, record.get("extra", {})


def load_checkpoint(path: str | os.PathLike):
    """``(params, extra)`` from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), str(path))
