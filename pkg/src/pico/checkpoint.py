"""Binary container for named float32 arrays plus a key=value trailer.

Layout: magic ``PICO``, version u32, tensor count u32; per tensor a u16 name
length, the UTF-8 name, a u8 rank, u32 dims, then the little-endian float32
payload. Whatever follows the last tensor is a UTF-8 block of ``key=value``
lines. Model checkpoints and the simulator's observation archives share this
format.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PICO"
VERSION = 1


def write_tensors(path, tensors: Mapping[str, np.ndarray], trailer: Mapping[str, object] | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())
        if trailer:
            lines = "".join(f"{k}={v}\n" for k, v in trailer.items())
            fh.write(lines.encode("utf-8"))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = arr.copy()
    trailer: dict[str, str] = {}
    if off < len(blob):
        for line in blob[off:].decode("utf-8").splitlines():
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                trailer[k] = v
    return tensors, trailer
