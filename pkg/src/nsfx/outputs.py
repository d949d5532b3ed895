"""Atomic file outputs: CSV tables, JSON summaries and the ``params.bin`` tensor archive.

``params.bin`` layout (all integers unsigned 32-bit little-endian)::

    b"NSFX"  version  count
    count times:
        name_len  name (UTF-8)  ndim  dim_0 ... dim_{ndim-1}  data (float32 LE, C order)
"""

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

PARAMS_MAGIC = b"NSFX"
PARAMS_VERSION = 1


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to a temporary sibling, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    atomic_write(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, obj):
    atomic_write(path, json.dumps(_jsonable(obj), indent=2) + "\n")


def encode_params(params):
    """Serialise ``{name: array}`` in insertion order."""
    out = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(params))]
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_params(raw):
    """Inverse of :func:`encode_params`; returns ``{name: float32 array}``."""
    if raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", field="magic")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError("truncated params file", field="header")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported params version {version}", field="version")
    params = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(raw):
            raise FormatError("truncated tensor name", field="name")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(raw):
            raise FormatError(f"truncated data for {name}", field="data")
        params[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", field="trailer")
    return params


def write_params(path, params):
    atomic_write(path, encode_params(params))


def read_params(path):
    return decode_params(Path(path).read_bytes())
