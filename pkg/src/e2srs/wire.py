"""
Binary codec for the E2-lite protocol and the E2SM-SRS indication payload.

Every message is a 12-byte header followed by ``payload_len`` body bytes.
All multi-byte integers and floats are big-endian.

Header::

    magic        u32   0x45324C53 ("E2LS")
    version      u8    1
    msg_type     u8    MsgType
    flags        u16   0
    payload_len  u32   body byte count

Bodies::

    E2_SETUP_REQUEST       agent_id u32, n u8, n x (function_id u16,
                           name_len u16, name utf-8, revision u8)
    E2_SETUP_RESPONSE      n u8, n x function_id u16
    SUBSCRIPTION_REQUEST   request_id u32, function_id u16, event_trigger u8
    SUBSCRIPTION_RESPONSE  request_id u32, status u8
    RIC_INDICATION         request_id u32, sequence u64, SRS payload
    ERROR_INDICATION       request_id u32, cause u8, text_len u16, text utf-8

SRS payload (E2SM-SRS)::

    ue_id u32, frame u16, slot u8, timestamp_ns u64, num_rus u8,
    per RU:  ru_id u8, num_trps u8, n_fft u32,
    per TRP: trp_id u8, n_fft x (re f32, im f32)
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = 0x45324C53
VERSION = 1
HEADER = struct.Struct(">IBBHI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 64 * 1024 * 1024

MAX_FRAME = 1024
MAX_SLOT = 160

_SRS_FIXED = struct.Struct(">IHBQB")
_RU_HEADER = struct.Struct(">BBI")
_SAMPLE_DTYPE = np.dtype(">c8")


class MsgType(IntEnum):
    E2_SETUP_REQUEST = 1
    E2_SETUP_RESPONSE = 2
    SUBSCRIPTION_REQUEST = 3
    SUBSCRIPTION_RESPONSE = 4
    RIC_INDICATION = 5
    ERROR_INDICATION = 6


class EventTrigger(IntEnum):
    ON_SRS_INDICATION = 1


class SubscriptionStatus(IntEnum):
    ACCEPTED = 0
    REJECTED_UNKNOWN_FUNCTION = 1
    REJECTED_BAD_TRIGGER = 2


class ErrorCause(IntEnum):
    UNSPECIFIED = 0
    DUPLICATE_AGENT_ID = 1
    NOT_REGISTERED = 2
    UNEXPECTED_MESSAGE = 3
    MALFORMED = 4


class CodecError(ValueError):
    """Base class for every encode/decode failure."""

    code = "CODEC_ERROR"


class BadMagic(CodecError):
    code = "BAD_MAGIC"


class BadVersion(CodecError):
    code = "BAD_VERSION"


class Truncated(CodecError):
    code = "TRUNCATED"


class LengthMismatch(CodecError):
    code = "LENGTH_MISMATCH"


class UnknownMsgType(CodecError):
    code = "UNKNOWN_MSG_TYPE"


class InvariantViolation(CodecError):
    code = "INVARIANT_VIOLATION"


# --------------------------------------------------------------------------
# Message types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RanFunction:
    function_id: int
    name: str
    revision: int = 1


@dataclass(frozen=True)
class E2SetupRequest:
    agent_id: int
    functions: tuple[RanFunction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))


@dataclass(frozen=True)
class E2SetupResponse:
    accepted: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "accepted", tuple(self.accepted))


@dataclass(frozen=True)
class SubscriptionRequest:
    request_id: int
    function_id: int
    event_trigger: int = EventTrigger.ON_SRS_INDICATION


@dataclass(frozen=True)
class SubscriptionResponse:
    request_id: int
    status: SubscriptionStatus


@dataclass(frozen=True)
class ErrorIndication:
    request_id: int
    cause: ErrorCause
    text: str = ""


@dataclass(eq=False)
class RuReport:
    """Channel estimates of one RU: one CFR row per TRP."""

    ru_id: int
    trp_ids: tuple[int, ...]
    cfr: np.ndarray  # (num_trps, n_fft) complex

    @property
    def n_fft(self) -> int:
        return int(self.cfr.shape[1])

    def __eq__(self, other):
        if not isinstance(other, RuReport):
            return NotImplemented
        return (
            self.ru_id == other.ru_id
            and tuple(self.trp_ids) == tuple(other.trp_ids)
            and self.cfr.shape == other.cfr.shape
            and _sample_bytes(self.cfr) == _sample_bytes(other.cfr)
        )


@dataclass(eq=False)
class SrsIndication:
    ue_id: int
    frame: int
    slot: int
    timestamp_ns: int
    rus: tuple[RuReport, ...] = ()

    def __post_init__(self):
        self.rus = tuple(self.rus)

    @property
    def n_fft(self) -> int:
        return self.rus[0].n_fft

    @property
    def num_trps(self) -> int:
        return sum(len(ru.trp_ids) for ru in self.rus)

    def cfr_matrix(self) -> np.ndarray:
        """All TRP rows stacked in RU order, as stored on the wire."""
        return np.concatenate([np.asarray(ru.cfr, dtype=_SAMPLE_DTYPE) for ru in self.rus])

    def __eq__(self, other):
        if not isinstance(other, SrsIndication):
            return NotImplemented
        return (
            (self.ue_id, self.frame, self.slot, self.timestamp_ns)
            == (other.ue_id, other.frame, other.slot, other.timestamp_ns)
            and self.rus == other.rus
        )


@dataclass(eq=False)
class RicIndication:
    request_id: int
    sequence: int
    payload: SrsIndication

    def __eq__(self, other):
        if not isinstance(other, RicIndication):
            return NotImplemented
        return (
            self.request_id == other.request_id
            and self.sequence == other.sequence
            and self.payload == other.payload
        )


Message = (
    E2SetupRequest
    | E2SetupResponse
    | SubscriptionRequest
    | SubscriptionResponse
    | RicIndication
    | ErrorIndication
)


def _sample_bytes(cfr) -> bytes:
    return np.ascontiguousarray(cfr, dtype=_SAMPLE_DTYPE).tobytes()


def srs_payload_size(trps_per_ru, n_fft: int) -> int:
    """Encoded size of an SRS payload for the given layout."""
    return _SRS_FIXED.size + sum(
        _RU_HEADER.size + m * (1 + 8 * n_fft) for m in trps_per_ru
    )


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------


def _check_uint(value, bits: int, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvariantViolation(f"{name} must be an integer, got {value!r}")
    if not 0 <= value < (1 << bits):
        raise InvariantViolation(f"{name}={value} does not fit in u{bits}")
    return int(value)


def _encode_text(text: str, name: str) -> bytes:
    try:
        raw = text.encode("utf-8")
    except (UnicodeEncodeError, AttributeError) as exc:
        raise InvariantViolation(f"{name} is not encodable as UTF-8") from exc
    if len(raw) > 0xFFFF:
        raise InvariantViolation(f"{name} longer than 65535 bytes")
    return struct.pack(">H", len(raw)) + raw


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def encode_srs_payload(ind: SrsIndication) -> bytes:
    _check_uint(ind.ue_id, 32, "ue_id")
    _check_uint(ind.timestamp_ns, 64, "timestamp_ns")
    if not 0 <= _check_uint(ind.frame, 16, "frame") < MAX_FRAME:
        raise InvariantViolation(f"frame={ind.frame} must be < {MAX_FRAME}")
    if not 0 <= _check_uint(ind.slot, 8, "slot") < MAX_SLOT:
        raise InvariantViolation(f"slot={ind.slot} must be < {MAX_SLOT}")
    if not 1 <= len(ind.rus) <= 255:
        raise InvariantViolation("num_rus must be in [1, 255]")

    n_fft = None
    parts = [_SRS_FIXED.pack(ind.ue_id, ind.frame, ind.slot, ind.timestamp_ns, len(ind.rus))]
    for ru in ind.rus:
        cfr = np.asarray(ru.cfr)
        if cfr.ndim != 2:
            raise InvariantViolation("RU cfr must be a 2-D (num_trps, n_fft) array")
        m, n = cfr.shape
        if not 1 <= m <= 255 or len(ru.trp_ids) != m:
            raise InvariantViolation("num_trps must be in [1, 255] and match trp_ids")
        if not _is_pow2(n) or n >= 1 << 32:
            raise InvariantViolation(f"n_fft={n} is not a power of two")
        if n_fft is None:
            n_fft = n
        elif n != n_fft:
            raise InvariantViolation("n_fft differs between RUs")
        parts.append(_RU_HEADER.pack(_check_uint(ru.ru_id, 8, "ru_id"), m, n))
        samples = np.ascontiguousarray(cfr, dtype=_SAMPLE_DTYPE)
        for row, trp_id in enumerate(ru.trp_ids):
            parts.append(bytes((_check_uint(trp_id, 8, "trp_id"),)))
            parts.append(samples[row].tobytes())
    return b"".join(parts)


def _encode_body(msg) -> tuple[MsgType, bytes]:
    if isinstance(msg, E2SetupRequest):
        if len(msg.functions) > 255:
            raise InvariantViolation("at most 255 RAN functions")
        out = [struct.pack(">IB", _check_uint(msg.agent_id, 32, "agent_id"), len(msg.functions))]
        for fn in msg.functions:
            out.append(struct.pack(">H", _check_uint(fn.function_id, 16, "function_id")))
            out.append(_encode_text(fn.name, "function name"))
            out.append(struct.pack(">B", _check_uint(fn.revision, 8, "revision")))
        return MsgType.E2_SETUP_REQUEST, b"".join(out)
    if isinstance(msg, E2SetupResponse):
        if len(msg.accepted) > 255:
            raise InvariantViolation("at most 255 accepted functions")
        ids = [_check_uint(f, 16, "function_id") for f in msg.accepted]
        return MsgType.E2_SETUP_RESPONSE, struct.pack(f">B{len(ids)}H", len(ids), *ids)
    if isinstance(msg, SubscriptionRequest):
        return MsgType.SUBSCRIPTION_REQUEST, struct.pack(
            ">IHB",
            _check_uint(msg.request_id, 32, "request_id"),
            _check_uint(msg.function_id, 16, "function_id"),
            _check_uint(msg.event_trigger, 8, "event_trigger"),
        )
    if isinstance(msg, SubscriptionResponse):
        status = SubscriptionStatus(msg.status)
        return MsgType.SUBSCRIPTION_RESPONSE, struct.pack(
            ">IB", _check_uint(msg.request_id, 32, "request_id"), status
        )
    if isinstance(msg, RicIndication):
        head = struct.pack(
            ">IQ",
            _check_uint(msg.request_id, 32, "request_id"),
            _check_uint(msg.sequence, 64, "sequence"),
        )
        return MsgType.RIC_INDICATION, head + encode_srs_payload(msg.payload)
    if isinstance(msg, ErrorIndication):
        cause = ErrorCause(msg.cause)
        return MsgType.ERROR_INDICATION, (
            struct.pack(">IB", _check_uint(msg.request_id, 32, "request_id"), cause)
            + _encode_text(msg.text, "error text")
        )
    raise InvariantViolation(f"not a protocol message: {type(msg).__name__}")


def encode_message(msg: Message) -> bytes:
    """Encode a protocol message into one framed byte string."""
    msg_type, body = _encode_body(msg)
    if len(body) > MAX_PAYLOAD:
        raise InvariantViolation(f"payload of {len(body)} bytes exceeds the 64 MiB cap")
    return HEADER.pack(MAGIC, VERSION, msg_type, 0, len(body)) + body


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> memoryview:
        if n > self.remaining():
            raise LengthMismatch(
                f"body needs {n} more bytes at offset {self.pos}, has {self.remaining()}"
            )
        view = self.buf[self.pos:self.pos + n]
        self.pos += n
        return view

    def unpack(self, st: struct.Struct | str):
        if isinstance(st, str):
            st = struct.Struct(st)
        return st.unpack(self.take(st.size))

    def text(self, name: str) -> str:
        (n,) = self.unpack(">H")
        raw = self.take(n)
        try:
            return bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvariantViolation(f"{name} is not valid UTF-8") from exc

    def done(self):
        if self.remaining():
            raise LengthMismatch(f"{self.remaining()} trailing body bytes")


def decode_header(data) -> tuple[MsgType, int]:
    """Validate a 12-byte header; return (msg_type, payload_len)."""
    if len(data) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    magic, version, msg_type, flags, payload_len = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic 0x{magic:08X}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise UnknownMsgType(f"unknown msg_type {msg_type}") from None
    if flags != 0:
        raise InvariantViolation(f"flags must be 0, got 0x{flags:04X}")
    if payload_len > MAX_PAYLOAD:
        raise LengthMismatch(f"payload_len {payload_len} exceeds the 64 MiB cap")
    return msg_type, payload_len


def _decode_srs(r: _Reader) -> SrsIndication:
    ue_id, frame, slot, ts, num_rus = r.unpack(_SRS_FIXED)
    if frame >= MAX_FRAME or slot >= MAX_SLOT or num_rus < 1:
        raise InvariantViolation("frame/slot/num_rus out of range")
    rus = []
    n_fft = None
    for _ in range(num_rus):
        ru_id, m, n = r.unpack(_RU_HEADER)
        if m < 1 or not _is_pow2(n):
            raise InvariantViolation(f"invalid RU layout num_trps={m} n_fft={n}")
        if n_fft is None:
            n_fft = n
        elif n != n_fft:
            raise InvariantViolation("n_fft differs between RUs")
        row_bytes = 1 + 8 * n
        if m * row_bytes > r.remaining():
            raise LengthMismatch("RU block longer than the declared payload")
        cfr = np.empty((m, n), dtype=_SAMPLE_DTYPE)
        trp_ids = []
        for row in range(m):
            (trp_id,) = r.take(1)
            trp_ids.append(trp_id)
            cfr[row] = np.frombuffer(r.take(8 * n), dtype=_SAMPLE_DTYPE)
        rus.append(RuReport(ru_id, tuple(trp_ids), cfr))
    return SrsIndication(ue_id, frame, slot, ts, tuple(rus))


def _decode_body(msg_type: MsgType, body: memoryview):
    r = _Reader(body)
    if msg_type is MsgType.E2_SETUP_REQUEST:
        agent_id, n = r.unpack(">IB")
        fns = []
        for _ in range(n):
            (fid,) = r.unpack(">H")
            name = r.text("function name")
            (rev,) = r.unpack(">B")
            fns.append(RanFunction(fid, name, rev))
        msg = E2SetupRequest(agent_id, tuple(fns))
    elif msg_type is MsgType.E2_SETUP_RESPONSE:
        (n,) = r.unpack(">B")
        msg = E2SetupResponse(tuple(r.unpack(f">{n}H")))
    elif msg_type is MsgType.SUBSCRIPTION_REQUEST:
        msg = SubscriptionRequest(*r.unpack(">IHB"))
    elif msg_type is MsgType.SUBSCRIPTION_RESPONSE:
        rid, status = r.unpack(">IB")
        try:
            msg = SubscriptionResponse(rid, SubscriptionStatus(status))
        except ValueError:
            raise InvariantViolation(f"unknown subscription status {status}") from None
    elif msg_type is MsgType.RIC_INDICATION:
        rid, seq = r.unpack(">IQ")
        msg = RicIndication(rid, seq, _decode_srs(r))
    else:
        rid, cause = r.unpack(">IB")
        try:
            cause = ErrorCause(cause)
        except ValueError:
            raise InvariantViolation(f"unknown error cause {cause}") from None
        msg = ErrorIndication(rid, cause, r.text("error text"))
    r.done()
    return msg


def decode_prefix(data) -> tuple[Message, int]:
    """Decode the message at the start of ``data``; return it and the bytes consumed."""
    view = memoryview(data).cast("B")
    msg_type, payload_len = decode_header(view)
    end = HEADER_SIZE + payload_len
    if len(view) < end:
        raise Truncated(f"header declares {payload_len} payload bytes, {len(view) - HEADER_SIZE} present")
    return _decode_body(msg_type, view[HEADER_SIZE:end]), end


def decode_message(data) -> Message:
    """Decode exactly one message; trailing bytes are an error."""
    msg, used = decode_prefix(data)
    if used != len(data):
        raise LengthMismatch(f"{len(data) - used} bytes after the message")
    return msg


def peek_indication(frame) -> tuple[int, int]:
    """(request_id, sequence) of an encoded RIC indication without decoding samples."""
    msg_type, payload_len = decode_header(frame)
    if msg_type is not MsgType.RIC_INDICATION:
        raise UnknownMsgType(f"expected RIC_INDICATION, got {msg_type.name}")
    if payload_len < 12 or len(frame) < HEADER_SIZE + 12:
        raise Truncated("indication too short")
    return struct.unpack_from(">IQ", frame, HEADER_SIZE)


# --------------------------------------------------------------------------
# Stream transport
# --------------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("peer closed the connection")
        got += k
    return buf


def read_frame(sock: socket.socket) -> bytes:
    """Read one complete framed message (header + payload) from a stream socket."""
    head = _recv_exact(sock, HEADER_SIZE)
    _, payload_len = decode_header(head)
    return bytes(head + _recv_exact(sock, payload_len))


def read_message(sock: socket.socket) -> Message:
    return decode_message(read_frame(sock))


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))
