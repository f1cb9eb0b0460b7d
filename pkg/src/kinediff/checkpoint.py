"""Binary checkpoint format shared by every trained module.

Layout: the ASCII magic ``HDPCKPT1``, a 4-byte little-endian unsigned header
length, a UTF-8 JSON header listing parameter names/shapes/byte offsets, then
one raw blob of little-endian float32 values.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"HDPCKPT1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params):
    """Write an ordered dict of name -> float32 array."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"parameter {name!r} is {arr.dtype}, not float32")
        raw = np.ascontiguousarray(arr).astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"params": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read back a name -> float32 array dict, preserving header order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header: {err}") from err
    pos += hlen
    blob = data[pos:]
    out = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: blob too short for {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        out[entry["name"]] = arr.astype(np.float32, copy=True)
    return out
