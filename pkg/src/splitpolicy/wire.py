"""Binary request/response framing for raw-frame and split-mode decisions.

Request header, little-endian, 35 bytes::

    magic "SPW1" | version u8 | mode u8 | seq u32 | client_send_ns u64 |
    width u16 | height u16 | channels u8 | quant_scale f32 | quant_offset f32 |
    payload_len u32

followed by ``payload_len = width * height * channels`` bytes.

Response header, little-endian, 36 bytes::

    magic "SPR1" | version u8 | status u8 | seq u32 | server_recv_ns u64 |
    server_send_ns u64 | server_compute_ns u64 | action_count u16

followed by ``action_count`` float32 actions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import SplitPolicyError

VERSION = 1
REQUEST_MAGIC = b"SPW1"
RESPONSE_MAGIC = b"SPR1"

_REQUEST = struct.Struct("<4sBBIQHHBffI")
_RESPONSE = struct.Struct("<4sBBIQQQH")
REQUEST_HEADER_SIZE = _REQUEST.size
RESPONSE_HEADER_SIZE = _RESPONSE.size


class Mode(IntEnum):
    RAW = 0
    SPLIT = 1


class Status(IntEnum):
    OK = 0
    MODE_REJECTED = 1
    DIMENSION_ERROR = 2
    MALFORMED = 3


class WireError(SplitPolicyError, ValueError):
    pass


class MagicError(WireError):
    pass


class VersionError(WireError):
    pass


class LengthError(WireError):
    pass


class TruncatedError(WireError):
    pass


class FieldError(WireError):
    """A header field holds a value outside its domain."""


@dataclass(frozen=True)
class RequestHeader:
    mode: Mode
    seq: int
    client_send_ns: int
    width: int
    height: int
    channels: int
    quant_scale: float = 0.0
    quant_offset: float = 0.0
    payload_len: int | None = None
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.payload_len is None:
            object.__setattr__(self, "payload_len", self.width * self.height * self.channels)
        # the header carries these as float32
        object.__setattr__(self, "quant_scale", float(np.float32(self.quant_scale)))
        object.__setattr__(self, "quant_offset", float(np.float32(self.quant_offset)))


@dataclass(frozen=True)
class ResponseRecord:
    seq: int
    actions: tuple[float, ...]
    server_recv_ns: int = 0
    server_send_ns: int = 0
    server_compute_ns: int = 0
    status: Status = Status.OK
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "status", Status(self.status))
        object.__setattr__(self, "actions", tuple(float(np.float32(a)) for a in self.actions))

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


def payload_bytes(mode: Mode | int | str, X: int, K: int = 4, n: int = 0) -> int:
    """Raw mode sends a 4X^2 RGBA frame; split mode a K(X/2^n)^2 feature map."""
    mode = parse_mode(mode)
    if mode == Mode.RAW:
        return 4 * X * X
    if X % (2 ** n):
        raise LengthError(f"X={X} is not divisible by 2^{n}")
    side = X // (2 ** n)
    return K * side * side


def parse_mode(mode) -> Mode:
    if isinstance(mode, str):
        try:
            return Mode[mode.upper()]
        except KeyError:
            raise FieldError(f"unknown mode {mode!r}") from None
    return Mode(mode)


def request_wire_size(mode, X: int, K: int = 4, n: int = 0) -> int:
    return REQUEST_HEADER_SIZE + payload_bytes(mode, X, K, n)


def response_wire_size(action_count: int) -> int:
    return RESPONSE_HEADER_SIZE + 4 * action_count


def _validate_request(h: RequestHeader) -> None:
    if h.version != VERSION:
        raise VersionError(f"unsupported version {h.version}")
    if h.payload_len != h.width * h.height * h.channels:
        raise LengthError(
            f"payload_len {h.payload_len} != {h.width}x{h.height}x{h.channels}"
        )
    if h.mode == Mode.RAW and h.channels != 4:
        raise FieldError(f"raw mode carries RGBA frames, got {h.channels} channels")
    if h.channels < 1:
        raise FieldError("channel count must be >= 1")
    if h.mode == Mode.SPLIT and not h.quant_scale > 0:
        raise FieldError("split mode needs a positive quant_scale")


def encode_request(header: RequestHeader, payload: bytes) -> bytes:
    _validate_request(header)
    if len(payload) != header.payload_len:
        raise LengthError(f"payload has {len(payload)} bytes, header says {header.payload_len}")
    try:
        head = _REQUEST.pack(
            REQUEST_MAGIC, header.version, int(header.mode), header.seq, header.client_send_ns,
            header.width, header.height, header.channels,
            header.quant_scale, header.quant_offset, header.payload_len,
        )
    except struct.error as exc:
        raise FieldError(str(exc)) from exc
    return head + bytes(payload)


def decode_request_header(buf: bytes) -> RequestHeader:
    if len(buf) < REQUEST_HEADER_SIZE:
        raise TruncatedError(f"need {REQUEST_HEADER_SIZE} header bytes, got {len(buf)}")
    (magic, version, mode, seq, send_ns, width, height, channels,
     scale, offset, payload_len) = _REQUEST.unpack_from(buf, 0)
    if magic != REQUEST_MAGIC:
        raise MagicError(f"bad request magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if mode not in (Mode.RAW, Mode.SPLIT):
        raise FieldError(f"unknown mode byte {mode}")
    if not (np.isfinite(scale) and np.isfinite(offset)):
        raise FieldError("non-finite quantization parameters")
    header = RequestHeader(Mode(mode), seq, send_ns, width, height, channels,
                           scale, offset, payload_len, version)
    _validate_request(header)
    return header


def decode_request(buf: bytes) -> tuple[RequestHeader, bytes]:
    header = decode_request_header(buf)
    body = len(buf) - REQUEST_HEADER_SIZE
    if body < header.payload_len:
        raise TruncatedError(f"payload truncated: {body} of {header.payload_len} bytes")
    if body > header.payload_len:
        raise LengthError(f"{body - header.payload_len} bytes beyond declared payload")
    return header, bytes(buf[REQUEST_HEADER_SIZE:])


def encode_response(record: ResponseRecord) -> bytes:
    if record.ok and len(record.actions) < 1:
        raise FieldError("an OK response carries at least one action")
    try:
        head = _RESPONSE.pack(
            RESPONSE_MAGIC, record.version, int(record.status), record.seq,
            record.server_recv_ns, record.server_send_ns, record.server_compute_ns,
            len(record.actions),
        )
    except struct.error as exc:
        raise FieldError(str(exc)) from exc
    return head + np.asarray(record.actions, dtype="<f4").tobytes()


def decode_response_header(buf: bytes) -> tuple[ResponseRecord, int]:
    """Parse the fixed header; returns a record without actions and the action count."""
    if len(buf) < RESPONSE_HEADER_SIZE:
        raise TruncatedError(f"need {RESPONSE_HEADER_SIZE} header bytes, got {len(buf)}")
    magic, version, status, seq, recv_ns, send_ns, compute_ns, count = _RESPONSE.unpack_from(buf, 0)
    if magic != RESPONSE_MAGIC:
        raise MagicError(f"bad response magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if status not in Status._value2member_map_:
        raise FieldError(f"unknown status {status}")
    if status == Status.OK and count < 1:
        raise FieldError("OK response without actions")
    return ResponseRecord(seq, (), recv_ns, send_ns, compute_ns, Status(status), version), count


def decode_response(buf: bytes) -> ResponseRecord:
    head, count = decode_response_header(buf)
    body = len(buf) - RESPONSE_HEADER_SIZE
    if body < 4 * count:
        raise TruncatedError(f"actions truncated: {body} of {4 * count} bytes")
    if body > 4 * count:
        raise LengthError(f"{body - 4 * count} bytes beyond declared actions")
    actions = np.frombuffer(buf, dtype="<f4", count=count, offset=RESPONSE_HEADER_SIZE)
    if not np.all(np.isfinite(actions)):
        raise FieldError("non-finite action values")
    return ResponseRecord(head.seq, tuple(actions.tolist()), head.server_recv_ns,
                          head.server_send_ns, head.server_compute_ns, head.status, head.version)


def recv_exact(sock, n: int) -> bytes:
    """Read exactly ``n`` bytes from a socket or raise ``TruncatedError``."""
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise TruncatedError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_request(sock) -> bytes:
    head = recv_exact(sock, REQUEST_HEADER_SIZE)
    header = decode_request_header(head)
    return head + recv_exact(sock, header.payload_len)


def read_response(sock) -> bytes:
    head = recv_exact(sock, RESPONSE_HEADER_SIZE)
    _, count = decode_response_header(head)
    return head + recv_exact(sock, 4 * count)
