"""Canonical binary encodings (big-endian, fixed field order).

Client request::

    [u32 length][u8 kind][u8 critical][u16 key_len][key][u32 value_len][value][u64 request_id]

The response mirrors the request layout and appends the tag as
``[u64 counter][u32 client_id]``. ``length`` counts the bytes after itself.
Two replicas that compute the same result therefore emit identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Optional

from .tags import ZERO_TAG, Tag

GET = 1
PUT = 2
ERROR = 3
KIND_NAMES = {GET: "get", PUT: "put", ERROR: "error"}

_U32 = struct.Struct(">I")
_HEAD = struct.Struct(">BBH")
_TAIL_REQ = struct.Struct(">Q")
_TAIL_RESP = struct.Struct(">QQI")


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    kind: int
    key: bytes
    value: bytes = b""
    critical: bool = False
    request_id: int = 0

    def __post_init__(self):
        if self.kind not in (GET, PUT):
            raise WireError(f"bad request kind {self.kind}")
        if self.critical and self.kind != PUT:
            raise WireError("only put requests can be critical")
        if self.kind == GET and self.value:
            raise WireError("get requests carry no value")


@dataclass(frozen=True)
class Response:
    kind: int
    key: bytes
    value: bytes = b""
    critical: bool = False
    request_id: int = 0
    tag: Tag = ZERO_TAG


def _encode(kind: int, critical: bool, key: bytes, value: bytes, tail: bytes) -> bytes:
    if len(key) > 0xFFFF:
        raise WireError("key too long")
    body = b"".join((_HEAD.pack(kind, 1 if critical else 0, len(key)), key,
                     _U32.pack(len(value)), value, tail))
    return _U32.pack(len(body)) + body


def encode_request(req: Request) -> bytes:
    return _encode(req.kind, req.critical, req.key, req.value, _TAIL_REQ.pack(req.request_id))


def encode_response(resp: Response) -> bytes:
    return _encode(resp.kind, resp.critical, resp.key, resp.value,
                   _TAIL_RESP.pack(resp.request_id, resp.tag.counter, resp.tag.client_id))


def _split(frame: bytes, tail_size: int):
    if len(frame) < 4:
        raise WireError("truncated frame")
    (length,) = _U32.unpack_from(frame, 0)
    if length != len(frame) - 4:
        raise WireError(f"length field {length} does not match frame size {len(frame) - 4}")
    kind, critical, klen = _HEAD.unpack_from(frame, 4)
    pos = 8
    key = bytes(frame[pos:pos + klen])
    pos += klen
    (vlen,) = _U32.unpack_from(frame, pos)
    pos += 4
    value = bytes(frame[pos:pos + vlen])
    pos += vlen
    if len(frame) - pos != tail_size:
        raise WireError("malformed frame tail")
    return kind, bool(critical), key, value, pos


def decode_request(frame: bytes) -> Request:
    kind, critical, key, value, pos = _split(frame, _TAIL_REQ.size)
    (rid,) = _TAIL_REQ.unpack_from(frame, pos)
    return Request(kind, key, value, critical, rid)


def decode_response(frame: bytes) -> Response:
    kind, critical, key, value, pos = _split(frame, _TAIL_RESP.size)
    rid, counter, cid = _TAIL_RESP.unpack_from(frame, pos)
    return Response(kind, key, value, critical, rid, Tag(counter, cid))


class FrameDecoder:
    """Splits a byte stream into length-prefixed frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[bytes]:
        buf = self._buf
        buf += data
        while len(buf) >= 4:
            (length,) = _U32.unpack_from(buf, 0)
            end = 4 + length
            if len(buf) < end:
                break
            frame = bytes(buf[:end])
            del buf[:end]
            yield frame

    @property
    def buffered(self) -> int:
        return len(self._buf)


# -- intra-datacenter messages ------------------------------------------------

FORWARD = 1      # frontend -> coordinator: value holds an encoded request
RESULT = 2       # coordinator -> frontend: value holds an encoded response
QUERY = 3
QUERY_REPLY = 4
STORE = 5
STORE_ACK = 6

_MSG_HEAD = struct.Struct(">BQH")
_MSG_TAG = struct.Struct(">QI")


@dataclass(frozen=True)
class Message:
    type: int
    op_id: int
    key: bytes = b""
    value: bytes = b""
    tag: Tag = ZERO_TAG
    client_id: int = 0


def encode_message(msg: Message) -> bytes:
    return b"".join((_MSG_HEAD.pack(msg.type, msg.op_id, len(msg.key)), msg.key,
                     _U32.pack(len(msg.value)), msg.value,
                     _MSG_TAG.pack(msg.tag.counter, msg.tag.client_id),
                     _U32.pack(msg.client_id)))


def decode_message(data: bytes) -> Message:
    mtype, op_id, klen = _MSG_HEAD.unpack_from(data, 0)
    pos = _MSG_HEAD.size
    key = bytes(data[pos:pos + klen])
    pos += klen
    (vlen,) = _U32.unpack_from(data, pos)
    pos += 4
    value = bytes(data[pos:pos + vlen])
    pos += vlen
    counter, cid = _MSG_TAG.unpack_from(data, pos)
    (client_id,) = _U32.unpack_from(data, pos + _MSG_TAG.size)
    return Message(mtype, op_id, key, value, Tag(counter, cid), client_id)


def response_for(req: Request, value: bytes, tag: Tag, kind: Optional[int] = None) -> Response:
    return Response(req.kind if kind is None else kind, req.key, value, req.critical,
                    req.request_id, tag)
