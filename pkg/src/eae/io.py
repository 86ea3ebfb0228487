"""JSON-header + little-endian float64 payload container.

Layout::

    b"EAEB"                      magic
    uint32 (LE)                  header length in bytes
    header                       UTF-8 JSON object
    payload                      concatenated '<f8' arrays

The header carries an ``arrays`` list of ``{"name", "shape"}`` entries giving
the order and shape of the payload blocks, plus any caller metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EAEB"


class ContainerError(ValueError):
    pass


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = dict(meta)
    header["arrays"] = entries
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not an EAE container (bad magic)")
    if len(data) < 8:
        raise ContainerError(f"{path}: truncated header length at byte 4")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise ContainerError(f"{path}: truncated header at byte {len(data)}")
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    pos = 8 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(data):
            raise ContainerError(f"{path}: payload truncated at byte {len(data)}")
        arrays[entry["name"]] = np.frombuffer(data[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(data):
        raise ContainerError(f"{path}: {len(data) - pos} trailing bytes after payload")
    return header, arrays
