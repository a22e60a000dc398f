"""Messages crossing the client/cloud boundary and the bus that carries them.

Every payload is reduced to bytes before delivery: the receiver only ever
sees a decoded copy. Messages hold ids, label spaces and encoded parameter
blobs; there is deliberately no field type able to carry samples, features
or per-sample statistics.
"""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, fields

_LEN = struct.Struct("<I")


def _labels(v) -> tuple[int, ...]:
    return tuple(int(y) for y in v)


@dataclass(frozen=True)
class GeneratorUpload:
    client_id: int
    label_space: tuple[int, ...]
    generator: bytes


@dataclass(frozen=True)
class LibraryEntry:
    client_id: int
    label_space: tuple[int, ...]
    generator: bytes


@dataclass(frozen=True)
class LibraryDownload:
    recipient: int
    entries: tuple[LibraryEntry, ...]


@dataclass(frozen=True)
class ModelUpload:
    client_id: int
    primary: bytes
    invariant: bytes
    specific: bytes
    global_classifier: bytes


@dataclass(frozen=True)
class ClassifierEntry:
    client_id: int
    label_space: tuple[int, ...]
    classifier: bytes


@dataclass(frozen=True)
class GlobalModelDistribution:
    primary: bytes
    invariant: bytes
    specific: bytes
    classifiers: tuple[ClassifierEntry, ...]


@dataclass(frozen=True)
class LocalModelUpload:
    """Baseline upload: the full local model of one client."""
    client_id: int
    model: bytes


@dataclass(frozen=True)
class AveragedModel:
    """Baseline download: the element-wise mean of all uploaded models."""
    model: bytes


MESSAGE_TYPES = (
    GeneratorUpload,
    LibraryDownload,
    ModelUpload,
    GlobalModelDistribution,
    LocalModelUpload,
    AveragedModel,
)
_NESTED = {"entries": LibraryEntry, "classifiers": ClassifierEntry}
_TAG = {cls: i + 1 for i, cls in enumerate(MESSAGE_TYPES)}
_BY_TAG = {i: cls for cls, i in _TAG.items()}


class MessageError(ValueError):
    pass


def _split(obj, blobs: list[bytes]):
    """JSON-able skeleton of a message; bytes fields become blob indices."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bytes):
            out[f.name] = {"blob": len(blobs)}
            blobs.append(v)
        elif f.name in _NESTED:
            out[f.name] = [_split(e, blobs) for e in v]
        elif f.name == "label_space":
            out[f.name] = list(_labels(v))
        elif isinstance(v, int):
            out[f.name] = int(v)
        else:
            raise MessageError(f"field {f.name} of type {type(v).__name__} cannot be sent")
    return out


def _join(cls, skel, blobs):
    kw = {}
    for f in fields(cls):
        v = skel[f.name]
        if isinstance(v, dict):
            kw[f.name] = blobs[v["blob"]]
        elif f.name in _NESTED:
            kw[f.name] = tuple(_join(_NESTED[f.name], e, blobs) for e in v)
        elif f.name == "label_space":
            kw[f.name] = _labels(v)
        else:
            kw[f.name] = v
    return cls(**kw)


def encode_message(msg) -> bytes:
    """``u8 tag | u32 header_len | header JSON | (u32 len | blob)*``."""
    tag = _TAG.get(type(msg))
    if tag is None:
        raise MessageError(f"{type(msg).__name__} is not a federation message")
    blobs: list[bytes] = []
    header = json.dumps(_split(msg, blobs), sort_keys=True, separators=(",", ":")).encode()
    parts = [bytes([tag]), _LEN.pack(len(header)), header]
    for b in blobs:
        parts += [_LEN.pack(len(b)), b]
    return b"".join(parts)


def decode_message(buf: bytes):
    if not buf or buf[0] not in _BY_TAG:
        raise MessageError(f"unknown message tag {buf[:1]!r}")
    cls = _BY_TAG[buf[0]]
    try:
        (hlen,) = _LEN.unpack_from(buf, 1)
        pos = 5 + hlen
        skel = json.loads(buf[5:pos])
        blobs = []
        while pos < len(buf):
            (n,) = _LEN.unpack_from(buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise MessageError(f"blob of {n} bytes truncated at offset {pos}")
            blobs.append(bytes(buf[pos:pos + n]))
            pos += n
    except (struct.error, json.JSONDecodeError) as e:
        raise MessageError(f"malformed {cls.__name__}: {e}") from e
    return _join(cls, skel, blobs)


class MessageBus:
    """In-process stand-in for the network; logs every payload size."""

    def __init__(self):
        self.log: list[dict] = []

    def send(self, msg, phase: str, sender: str, receiver: str):
        raw = encode_message(msg)
        self.log.append({"phase": phase, "sender": sender, "receiver": receiver,
                         "kind": type(msg).__name__, "bytes": len(raw)})
        return decode_message(raw)

    def bytes_per_phase(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for rec in self.log:
            out[rec["phase"]] += rec["bytes"]
        return dict(out)
