"""Binary parameter codec.

Each named tensor is written as::

    u32 name_len | name (UTF-8) | u8 rank | u32 extent * rank | f32 data (LE)

Records are concatenated in insertion order. The stream carries no count;
it ends where the bytes end.
"""

from __future__ import annotations

import struct

import numpy as np


class CodecError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_params(params: dict[str, np.ndarray]) -> bytes:
    parts = []
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_params(buf: bytes, dtype=np.float32) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    view = memoryview(buf)
    pos = 0
    end = len(buf)

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise CodecError(f"truncated parameter stream: need {n} bytes, {end - pos} left", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (nlen,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid UTF-8 tensor name: {exc}", start) from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * count), dtype="<f4")
        out[name] = data.reshape(shape).astype(dtype)
    return out
