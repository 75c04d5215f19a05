"""Versioned binary wire format for round messages.

Frame layout, little-endian throughout:

    [u32 total_len] [u16 version] [u8 kind] [u32 round] [payload]

total_len counts every byte after the length field.  Payloads:

    BROADCAST: params block, prototype block (global set)
    UPDATE:    params block, prototype block (local set), u32 dataset_size
    SHUTDOWN:  empty

params block:     [u32 count] [count x f64]
prototype block:  [u16 owner] [u16 class_count] [u16 dim]
                  then per class, ascending id: [u16 class_id] [u32 support]
                  [dim x f64]

owner 0xFFFF means the global set.  Decoding is strict: short buffers raise
Truncated, extra bytes raise TrailingBytes, and an unknown version raises
BadMagicVersion -- never an uncontrolled crash.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicVersion, TrailingBytes, Truncated, WireError
from .prototypes import GLOBAL, PrototypeSet

VERSION = 1

BROADCAST = 1
UPDATE = 2
SHUTDOWN = 3

_KINDS = (BROADCAST, UPDATE, SHUTDOWN)
_GLOBAL_OWNER = 0xFFFF


@dataclass(frozen=True)
class RoundMessage:
    kind: int
    round: int
    params: np.ndarray | None = None
    protos: PrototypeSet | None = None
    dataset_size: int | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoundMessage):
            return NotImplemented
        if (self.kind, self.round, self.dataset_size) != \
                (other.kind, other.round, other.dataset_size):
            return False
        if (self.params is None) != (other.params is None):
            return False
        if self.params is not None and \
                self.params.tobytes() != other.params.tobytes():
            return False
        return self.protos == other.protos


class _Reader:
    """Bounds-checked cursor over one frame's bytes."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(f"need {n} bytes at offset {self.pos}, "
                            f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64_array(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise TrailingBytes(f"{len(self.buf) - self.pos} bytes left over")


def _encode_params(vec: np.ndarray) -> bytes:
    vec = np.ascontiguousarray(vec, dtype="<f8")
    return struct.pack("<I", vec.size) + vec.tobytes()


def _decode_params(r: _Reader) -> np.ndarray:
    return r.f64_array(r.u32())


def _encode_protos(pset: PrototypeSet) -> bytes:
    owner = _GLOBAL_OWNER if pset.owner == GLOBAL else int(pset.owner)
    if not 0 <= owner <= 0xFFFF:
        raise WireError(f"owner {pset.owner} not encodable")
    classes = pset.classes
    dim = pset.dim or 0
    out = [struct.pack("<HHH", owner, len(classes), dim)]
    for cls in classes:
        vec = np.ascontiguousarray(pset.vectors[cls], dtype="<f8")
        out.append(struct.pack("<HI", cls, pset.support[cls]))
        out.append(vec.tobytes())
    return b"".join(out)


def _decode_protos(r: _Reader) -> PrototypeSet:
    owner_raw = r.u16()
    owner = GLOBAL if owner_raw == _GLOBAL_OWNER else owner_raw
    n_classes = r.u16()
    dim = r.u16()
    vectors: dict[int, np.ndarray] = {}
    support: dict[int, int] = {}
    for _ in range(n_classes):
        cls = r.u16()
        support[cls] = r.u32()
        vectors[cls] = r.f64_array(dim)
    return PrototypeSet(vectors, support, owner)


def encode(msg: RoundMessage) -> bytes:
    if msg.kind not in _KINDS:
        raise WireError(f"unknown message kind {msg.kind}")
    body = struct.pack("<HBI", VERSION, msg.kind, msg.round)
    if msg.kind == BROADCAST:
        body += _encode_params(msg.params) + _encode_protos(msg.protos)
    elif msg.kind == UPDATE:
        body += (_encode_params(msg.params) + _encode_protos(msg.protos)
                 + struct.pack("<I", msg.dataset_size))
    return struct.pack("<I", len(body)) + body


def decode(buf: bytes) -> RoundMessage:
    if len(buf) < 4:
        raise Truncated(f"frame header needs 4 bytes, have {len(buf)}")
    (total_len,) = struct.unpack("<I", buf[:4])
    if len(buf) - 4 < total_len:
        raise Truncated(f"frame declares {total_len} bytes, have {len(buf) - 4}")
    if len(buf) - 4 > total_len:
        raise TrailingBytes(f"{len(buf) - 4 - total_len} bytes past frame end")

    r = _Reader(buf[4:])
    version = r.u16()
    if version != VERSION:
        raise BadMagicVersion(f"unsupported wire version {version}")
    kind = r.u8()
    if kind not in _KINDS:
        raise BadMagicVersion(f"unknown message kind {kind}")
    rnd = r.u32()

    if kind == SHUTDOWN:
        r.done()
        return RoundMessage(kind=kind, round=rnd)
    params = _decode_params(r)
    protos = _decode_protos(r)
    if kind == BROADCAST:
        r.done()
        return RoundMessage(kind=kind, round=rnd, params=params, protos=protos)
    size = r.u32()
    r.done()
    return RoundMessage(kind=kind, round=rnd, params=params, protos=protos,
                        dataset_size=size)
