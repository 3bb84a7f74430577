"""Message bodies exchanged over the simulated fabric, and their byte encoding.

Every control message starts with a fixed header ``kind: u8, volume_id: u64,
epoch: u64`` (little-endian) followed by a kind-specific body.  Strings are
``u16`` length-prefixed UTF-8.  ``IoRsp`` is framed as ``kind: u8, status: u8``
plus payload.  A frame is never smaller than :data:`HEADER_BYTES` on the wire;
:func:`wire_size` applies that floor.

The simulator does not serialize every message (payloads are large); it uses
:func:`wire_size`, which agrees with ``len(encode(msg))`` by construction.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import STATUS_OK
from .extent import MappingTable, PhysicalLocation, Segment
from .fabric import HEADER_BYTES

HEADER = struct.Struct("<BQQ")
U8, U16, U32, U64 = (struct.Struct(f) for f in ("<B", "<H", "<I", "<Q"))

READ, WRITE = "R", "W"


class Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(U8.pack(v))

    def u16(self, v):
        self.parts.append(U16.pack(v))

    def u32(self, v):
        self.parts.append(U32.pack(v))

    def u64(self, v):
        self.parts.append(U64.pack(v))

    def str(self, s):
        b = s.encode()
        self.u16(len(b))
        self.parts.append(b)

    def raw(self, b):
        self.parts.append(bytes(b))

    def getvalue(self):
        return b"".join(self.parts)


class Reader:
    def __init__(self, data, pos=0):
        self.data = memoryview(data)
        self.pos = pos

    def _take(self, st):
        if self.pos + st.size > len(self.data):
            raise ValueError("truncated frame")
        (v,) = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return v

    def u8(self):
        return self._take(U8)

    def u16(self):
        return self._take(U16)

    def u32(self):
        return self._take(U32)

    def u64(self):
        return self._take(U64)

    def str(self):
        n = self.u16()
        if self.pos + n > len(self.data):
            raise ValueError("truncated string")
        s = bytes(self.data[self.pos:self.pos + n]).decode()
        self.pos += n
        return s

    def raw(self, n=None):
        end = len(self.data) if n is None else self.pos + n
        if end > len(self.data):
            raise ValueError("truncated payload")
        b = bytes(self.data[self.pos:end])
        self.pos = end
        return b

    def done(self):
        return self.pos == len(self.data)


def write_location(w, loc):
    if loc is None:
        w.u8(0)
    else:
        w.u8(1)
        w.str(loc.subsystem_id)
        w.u64(loc.device_lba)


def read_location(r):
    if r.u8() == 0:
        return None
    return PhysicalLocation(r.str(), r.u64())


def write_table(w, t):
    w.u64(t.volume_id)
    w.u64(t.size_blocks)
    w.u32(t.extent_size_blocks)
    w.u64(t.epoch)
    w.u32(t.n_extents)
    for loc in t.locations:
        write_location(w, loc)


def read_table(r):
    vid, size, esz, epoch, n = r.u64(), r.u64(), r.u32(), r.u64(), r.u32()
    return MappingTable(vid, size, esz, epoch, [read_location(r) for _ in range(n)])


@dataclass
class PathGrant:
    """Answer to a path resolution: physical segments valid at ``epoch``."""
    volume_id: int
    segments: list
    epoch: int
    granted_to: str
    # extents mapped by the resolution that produced this grant; not on the wire
    allocated: list = field(default_factory=list, compare=False, repr=False)

    @property
    def zero_fill(self):
        return any(s.location is None for s in self.segments)


@dataclass
class Invalidation:
    volume_id: int
    new_epoch: int


class Body:
    KIND = 0
    NAME = ""

    def _encode_body(self, w):
        pass

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch)


_REGISTRY: dict[int, type] = {}


def _register(cls):
    _REGISTRY[cls.KIND] = cls
    return cls


@_register
@dataclass
class ResolveReq(Body):
    KIND, NAME = 1, "ResolveReq"
    volume_id: int
    epoch: int
    start: int
    length: int
    for_write: bool
    requester: str
    tag: Any = field(default=None, compare=False)

    def _encode_body(self, w):
        w.u64(self.start)
        w.u32(self.length)
        w.u8(int(self.for_write))
        w.str(self.requester)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u64(), r.u32(), bool(r.u8()), r.str())


@_register
@dataclass
class ResolveRsp(Body):
    KIND, NAME = 2, "ResolveRsp"
    volume_id: int
    epoch: int
    status: int = STATUS_OK
    grant: Optional[PathGrant] = None
    tag: Any = field(default=None, compare=False)

    def __post_init__(self):
        # the grant rides on the header's volume and epoch fields
        g = self.grant
        if g is not None and (g.volume_id, g.epoch) != (self.volume_id, self.epoch):
            raise ValueError("grant volume/epoch must match the response header")

    def _encode_body(self, w):
        w.u8(self.status)
        if self.grant is None:
            w.u8(0)
            return
        w.u8(1)
        w.str(self.grant.granted_to)
        w.u32(len(self.grant.segments))
        for seg in self.grant.segments:
            write_location(w, seg.location)
            w.u32(seg.length)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        status = r.u8()
        grant = None
        if r.u8():
            to = r.str()
            segs = []
            for _ in range(r.u32()):
                loc = read_location(r)
                segs.append(Segment(loc, r.u32()))
            grant = PathGrant(volume_id, segs, epoch, to)
        return cls(volume_id, epoch, status, grant)


@_register
@dataclass
class Invalidate(Body):
    KIND, NAME = 3, "Invalidate"
    volume_id: int
    epoch: int


@_register
@dataclass
class MapPush(Body):
    KIND, NAME = 4, "MapPush"
    volume_id: int
    epoch: int
    table: MappingTable = None

    def _encode_body(self, w):
        write_table(w, self.table)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, read_table(r))


@_register
@dataclass
class CreateVolume(Body):
    KIND, NAME = 5, "CreateVolume"
    volume_id: int
    epoch: int
    pool_id: str = "default"
    size_blocks: int = 0
    policy: str = "thin"
    stripe_unit_blocks: int = 0
    stripe_devices: tuple = ()

    def _encode_body(self, w):
        w.str(self.pool_id)
        w.u64(self.size_blocks)
        w.str(self.policy)
        w.u32(self.stripe_unit_blocks)
        w.u16(len(self.stripe_devices))
        for d in self.stripe_devices:
            w.str(d)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        pool, size, policy, unit = r.str(), r.u64(), r.str(), r.u32()
        devs = tuple(r.str() for _ in range(r.u16()))
        return cls(volume_id, epoch, pool, size, policy, unit, devs)


@_register
@dataclass
class RegisterSubsystem(Body):
    KIND, NAME = 6, "RegisterSubsystem"
    volume_id: int
    epoch: int
    subsystem_id: str = ""
    capacity_blocks: int = 0
    pool_id: str = "default"

    def _encode_body(self, w):
        w.str(self.subsystem_id)
        w.u64(self.capacity_blocks)
        w.str(self.pool_id)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.str(), r.u64(), r.str())


@_register
@dataclass
class MigrateExtent(Body):
    KIND, NAME = 7, "MigrateExtent"
    volume_id: int
    epoch: int
    extent_index: int = 0
    location: Optional[PhysicalLocation] = None

    def _encode_body(self, w):
        w.u64(self.extent_index)
        write_location(w, self.location)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u64(), read_location(r))


@_register
@dataclass
class IoReq(Body):
    """Block I/O.  ``lba`` is physical toward a subsystem, virtual toward an
    appliance or a subsystem-level controller."""
    KIND, NAME = 8, "IoReq"
    volume_id: int
    epoch: int
    op: str = READ
    lba: int = 0
    length: int = 1
    payload: bytes = b""
    tag: Any = field(default=None, compare=False)
    initiator: str = field(default="", compare=False)

    FIXED = HEADER.size + 1 + U64.size + U32.size

    def _encode_body(self, w):
        w.u8(1 if self.op == WRITE else 0)
        w.u64(self.lba)
        w.u32(self.length)
        w.raw(self.payload)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        op = WRITE if r.u8() else READ
        return cls(volume_id, epoch, op, r.u64(), r.u32(), r.raw())


@_register
@dataclass
class IoRsp(Body):
    KIND, NAME = 9, "IoRsp"
    volume_id = epoch = 0  # not carried on the wire
    status: int = STATUS_OK
    payload: bytes = b""
    tag: Any = field(default=None, compare=False)

    FIXED = 2

    def encode(self):
        return U8.pack(self.KIND) + U8.pack(self.status) + bytes(self.payload)


@_register
@dataclass
class MapExtend(Body):
    """Newly allocated extent, same epoch: an additive update to a presenter's map."""
    KIND, NAME = 10, "MapExtend"
    volume_id: int
    epoch: int
    extent_index: int = 0
    location: Optional[PhysicalLocation] = None

    _encode_body = MigrateExtent._encode_body

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u64(), read_location(r))


@_register
@dataclass
class EpochFence(Body):
    KIND, NAME = 11, "EpochFence"
    volume_id: int
    epoch: int
    tag: Any = field(default=None, compare=False)


@_register
@dataclass
class FenceAck(Body):
    KIND, NAME = 12, "FenceAck"
    volume_id: int
    epoch: int
    tag: Any = field(default=None, compare=False)


@_register
@dataclass
class AclSet(Body):
    """Zone ``[lba, lba+length)`` to ``initiator``; an empty initiator revokes."""
    KIND, NAME = 13, "AclSet"
    volume_id: int
    epoch: int
    lba: int = 0
    length: int = 0
    initiator: str = ""

    def _encode_body(self, w):
        w.u64(self.lba)
        w.u64(self.length)
        w.str(self.initiator)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u64(), r.u64(), r.str())


@_register
@dataclass
class CopyReq(Body):
    KIND, NAME = 14, "CopyReq"
    volume_id: int
    epoch: int
    src_lba: int = 0
    dst_subsystem: str = ""
    dst_lba: int = 0
    length: int = 0
    requester: str = ""
    tag: Any = field(default=None, compare=False)

    def _encode_body(self, w):
        w.u64(self.src_lba)
        w.str(self.dst_subsystem)
        w.u64(self.dst_lba)
        w.u32(self.length)
        w.str(self.requester)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u64(), r.str(), r.u64(), r.u32(), r.str())


@_register
@dataclass
class CopyData(Body):
    KIND, NAME = 15, "CopyData"
    volume_id: int
    epoch: int
    dst_lba: int = 0
    length: int = 0
    requester: str = ""
    payload: bytes = b""
    tag: Any = field(default=None, compare=False)

    def _encode_body(self, w):
        w.u64(self.dst_lba)
        w.u32(self.length)
        w.str(self.requester)
        w.raw(self.payload)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u64(), r.u32(), r.str(), r.raw())


@_register
@dataclass
class CopyDone(Body):
    KIND, NAME = 16, "CopyDone"
    volume_id: int
    epoch: int
    status: int = STATUS_OK
    tag: Any = field(default=None, compare=False)

    def _encode_body(self, w):
        w.u8(self.status)

    @classmethod
    def _decode_body(cls, r, volume_id, epoch):
        return cls(volume_id, epoch, r.u8())


# message kinds that never carry block payload
CONTROL_KINDS = frozenset(c.NAME for c in _REGISTRY.values()
                          if c.NAME not in ("IoReq", "IoRsp", "CopyData"))
DATA_KINDS = frozenset({"IoReq", "IoRsp", "CopyData"})


def encode(body):
    if isinstance(body, IoRsp):
        return body.encode()
    w = Writer()
    w.raw(HEADER.pack(body.KIND, body.volume_id, body.epoch))
    body._encode_body(w)
    return w.getvalue()


def decode(data):
    if not data:
        raise ValueError("empty frame")
    kind = data[0]
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown message kind {kind}") from None
    if cls is IoRsp:
        if len(data) < 2:
            raise ValueError("truncated frame")
        return IoRsp(data[1], bytes(data[2:]))
    r = Reader(data)
    _, volume_id, epoch = r.u8(), r.u64(), r.u64()
    body = cls._decode_body(r, volume_id, epoch)
    if not r.done():
        raise ValueError(f"{cls.NAME}: {len(r.data) - r.pos} trailing bytes")
    return body


def encoded_len(body):
    if isinstance(body, IoReq):
        return IoReq.FIXED + len(body.payload)
    if isinstance(body, IoRsp):
        return IoRsp.FIXED + len(body.payload)
    if isinstance(body, CopyData):
        return (HEADER.size + U64.size + U32.size + U16.size
                + len(body.requester.encode()) + len(body.payload))
    return len(encode(body))


def wire_size(body):
    return max(HEADER_BYTES, encoded_len(body))
