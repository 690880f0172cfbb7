"""Model checkpoints.

Layout (little-endian)::

    b"STDK"  u8 version (1)
    u32 n    config text, n bytes UTF-8 (the flat ``key = value`` run config)
    u32 k    number of tensor records
    k STDF records (see :mod:`stead.data`), label 0, id = tensor name

Tensor names: model parameters as in :func:`stead.model.param_shapes`,
``features.<i>`` for the fixed random projection of attention block ``i``,
and optimizer state as ``opt.m.<param>``, ``opt.v.<param>`` and the scalar
``opt.step``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import decode_record, encode_record
from .errors import FormatError

MAGIC = b"STDK"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    params: dict
    features: list = field(default_factory=list)
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    records = [encode_record(v, 0, k) for k, v in ckpt.params.items()]
    records += [encode_record(w, 0, f"features.{i}") for i, w in enumerate(ckpt.features)]
    records += [encode_record(v, 0, f"opt.m.{k}") for k, v in ckpt.opt_m.items()]
    records += [encode_record(v, 0, f"opt.v.{k}") for k, v in ckpt.opt_v.items()]
    if ckpt.opt_step is not None:
        records.append(encode_record(np.array(float(ckpt.opt_step)), 0, "opt.step"))
    text = ckpt.config_text.encode("utf-8")
    blob = MAGIC + struct.pack("<BI", VERSION, len(text)) + text + struct.pack("<I", len(records))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob + b"".join(records))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", 0)
    if len(buf) < 9:
        raise FormatError("truncated checkpoint header", 4)
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 9
    if pos + n + 4 > len(buf):
        raise FormatError("truncated checkpoint config", pos)
    text = buf[pos : pos + n].decode("utf-8")
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    ckpt = Checkpoint(text, {})
    features = {}
    for _ in range(count):
        arr, _label, name, pos = decode_record(buf, pos)
        if name.startswith("opt.m."):
            ckpt.opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            ckpt.opt_v[name[6:]] = arr
        elif name == "opt.step":
            ckpt.opt_step = int(arr.item())
        elif name.startswith("features."):
            features[int(name.split(".", 1)[1])] = arr
        else:
            ckpt.params[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record", pos)
    ckpt.features = [features[i] for i in sorted(features)]
    return ckpt
