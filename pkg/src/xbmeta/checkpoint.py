"""Binary checkpoint files (``OMD1``).

Layout, all little-endian::

    b"OMD1" | u32 version | u32 epoch | u32 header_len | header JSON | f64 payload

The JSON header carries the parameter layout, the config digest and any
caller metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, LayoutError
from .params import ParamVector

MAGIC = b"OMD1"
VERSION = 1
_HEAD = struct.Struct("<4sIII")


def save_checkpoint(path, theta: ParamVector, epoch: int = 0, config_digest: str = "", meta: Optional[dict] = None) -> Path:
    header = {
        "layout": [[name, list(shape)] for name, shape in theta.layout],
        "config_digest": config_digest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, int(epoch), len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(theta.values, dtype="<f8").tobytes())
    return path


def load_checkpoint(path, expected_layout=None, expected_digest: Optional[str] = None):
    """Read a checkpoint back.

    Returns:
        ``(theta, info)`` where ``info`` holds ``epoch``, ``config_digest`` and ``meta``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, epoch, n_header = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _HEAD.size + n_header
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    n = sum(int(np.prod(shape)) for _, shape in layout)
    payload = raw[start:]
    if len(payload) != 8 * n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * n}")
    if expected_layout is not None and tuple((a, tuple(b)) for a, b in expected_layout) != layout:
        raise LayoutError(f"{path}: checkpoint layout does not match the expected layout")
    if expected_digest is not None and header["config_digest"] != expected_digest:
        raise FormatError(f"{path}: config digest mismatch")
    theta = ParamVector(np.frombuffer(payload, dtype="<f8").astype(np.float64), layout)
    return theta, {"epoch": epoch, "config_digest": header["config_digest"], "meta": header["meta"]}
