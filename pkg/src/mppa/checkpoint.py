"""Flat binary checkpoint format.

All integers are little-endian. Layout::

    magic        8 bytes   b"MPPACKPT"
    version      u32       1
    n_config     u32
    n_config x   key:   u32 byte length + UTF-8
                 value: u32 byte length + UTF-8     (ModelConfig fields as text)
    n_params     u32
    n_params x   name:  u32 byte length + UTF-8
                 ndim   u32
                 dims   ndim x u64
                 data   prod(dims) x float64 little-endian, row-major

Parameters are written in the order of the mapping passed to
:func:`save_checkpoint`; loading restores that order and every bit.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from mppa.model import ModelConfig

MAGIC = b"MPPACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _get(fh, fmt: str):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _get_str(fh) -> str:
    (n,) = _get(fh, "<I")
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw.decode("utf-8")


def dumps(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    items = cfg.to_items()
    buf.write(struct.pack("<I", len(items)))
    for k, v in items:
        _put_str(buf, k)
        _put_str(buf, v)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        _put_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    fh = io.BytesIO(blob)
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an MPPA checkpoint (bad magic)")
    (version,) = _get(fh, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_cfg,) = _get(fh, "<I")
    items = {}
    for _ in range(n_cfg):
        k = _get_str(fh)
        items[k] = _get_str(fh)
    cfg = ModelConfig.from_items(items)
    (n_params,) = _get(fh, "<I")
    params = {}
    for _ in range(n_params):
        name = _get_str(fh)
        (ndim,) = _get(fh, "<I")
        shape = _get(fh, f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise CheckpointError(f"truncated payload for {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return cfg, params


def save_checkpoint(path, cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(dumps(cfg, params))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(os.fspath(path), "rb") as fh:
        return loads(fh.read())
