"""Versioned binary checkpoints.

Layout (little-endian): ``b"WATT"``, u32 version, u32 header length, UTF-8 JSON
header, then every array of ``Module.state_arrays()`` (parameters then buffers,
declaration order) as raw f32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ArchConfig, WattEffNet, build

MAGIC = b"WATT"
VERSION = 1


def save(model: WattEffNet, path, extra: dict | None = None) -> None:
    arrays = model.state_arrays()
    header = {
        "arch": model.config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(raw)) + raw)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read(path) -> tuple[dict, list[np.ndarray]]:
    """Header dict and the arrays (as f32), validated against the header."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos = 12 + hlen
    arrays = []
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: payload truncated in tensor {t['name']}")
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n // 4, offset=pos).reshape(t["shape"]))
        pos += n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after payload")
    return header, arrays


def load(path, dtype=np.float32) -> tuple[WattEffNet, dict]:
    header, arrays = read(path)
    model = build(ArchConfig.from_dict(header["arch"]), dtype=dtype)
    names = [n for n, _ in model.state_arrays()]
    if names != [t["name"] for t in header["tensors"]]:
        raise CheckpointError(f"{path}: tensor layout does not match the stored architecture")
    model.load_state_arrays(arrays)
    model.eval()
    return model, header
