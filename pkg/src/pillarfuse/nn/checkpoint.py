"""Binary checkpoint files for model state.

Layout (all integers little-endian):

    magic   4 bytes  b"PFCK"
    version u16      currently 1
    count   u32      number of entries
    entry   repeated count times:
        name_len u16, name utf-8 bytes
        rank     u8
        dims     u32 * rank
        payload  float32 * prod(dims)

Values are stored as float32 regardless of in-memory dtype; loading returns
float32 arrays and ``load_state_dict`` casts into the model's dtype.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import TruncatedFile

MAGIC = b"PFCK"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write a name->array mapping; iteration order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr)
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"checkpoint ended inside {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise TruncatedFile("not a checkpoint file (bad magic)")
        version, count = struct.unpack("<HI", _read_exact(f, 6, "header"))
        if version != VERSION:
            raise TruncatedFile(f"unsupported checkpoint version {version}")
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * n, f"payload of {name}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        tail = f.read(1)
        if tail:
            raise TruncatedFile("trailing bytes after final checkpoint entry")
    return state
