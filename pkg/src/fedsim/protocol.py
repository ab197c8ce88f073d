"""Message set and framing for the server/client stream.

Every exchange is one frame:

    +-------+---------+----------+------------+----------------+
    | magic | version | msg_type | length     | body           |
    | FLWR  | u8 = 1  | u8       | u32 BE     | length bytes   |
    +-------+---------+----------+------------+----------------+

Header integers are big-endian. The body encodes the variant's fields in
declaration order: strings as u16 BE length + UTF-8, Weights via the
tensor codec, ConfigMap as u16 BE entry count then per entry key string,
value tag u8 (0 = i64, 1 = f64, 2 = str, 3 = bool) and the value (i64/f64
as 8 bytes BE, str as u32 BE length + UTF-8, bool as one byte).

The stream carries exactly one outstanding instruction at a time, so
frames need no request ids. Bad magic, unknown version, unknown type and
oversized length are fatal for the connection; a short buffer is only a
needs-more-bytes signal so readers can accumulate partial frames.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Any, Union

from .tensors import (
    DecodeError,
    Weights,
    decode_weights_from,
    encode_weights_into,
    weights_byte_size,
)

MAGIC = b"FLWR"
VERSION = 1
MAX_BODY_LEN = 1 << 30
HEADER_LEN = 10

ConfigMap = dict[str, Union[int, float, str, bool]]

_CONFIG_TAG_I64 = 0
_CONFIG_TAG_F64 = 1
_CONFIG_TAG_STR = 2
_CONFIG_TAG_BOOL = 3

_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1


class ProtocolError(ValueError):
    """Unrecoverable framing or body fault; close the connection."""


class NeedMoreData(Exception):
    """Buffer ends before the frame does. Feed more bytes and retry."""


class MessageType(enum.IntEnum):
    CLIENT_HELLO = 1
    GET_WEIGHTS_INS = 2
    GET_WEIGHTS_RES = 3
    FIT_INS = 4
    FIT_RES = 5
    EVALUATE_INS = 6
    EVALUATE_RES = 7
    RECONNECT_INS = 8
    DISCONNECT_RES = 9
    ERROR_RES = 10


class DisconnectReason(enum.IntEnum):
    RECONNECT_LATER = 0
    POWER_STATE_CHANGE = 1
    SHUTDOWN = 2
    ERROR = 3


@dataclass
class ClientHello:
    client_name: str
    capabilities: ConfigMap = field(default_factory=dict)


@dataclass
class GetWeightsIns:
    pass


@dataclass
class GetWeightsRes:
    weights: Weights


@dataclass
class FitIns:
    weights: Weights
    config: ConfigMap = field(default_factory=dict)


@dataclass
class FitRes:
    weights: Weights
    num_examples: int
    metrics: ConfigMap = field(default_factory=dict)


@dataclass
class EvaluateIns:
    weights: Weights
    config: ConfigMap = field(default_factory=dict)


@dataclass
class EvaluateRes:
    loss: float
    num_examples: int
    metrics: ConfigMap = field(default_factory=dict)


@dataclass
class ReconnectIns:
    # 0 means a permanent disconnect request (shutdown).
    seconds: int = 0


@dataclass
class DisconnectRes:
    reason: DisconnectReason


@dataclass
class ErrorRes:
    code: int
    detail: str = ""


Message = Union[
    ClientHello,
    GetWeightsIns,
    GetWeightsRes,
    FitIns,
    FitRes,
    EvaluateIns,
    EvaluateRes,
    ReconnectIns,
    DisconnectRes,
    ErrorRes,
]

_TYPE_BY_CLASS: dict[type, MessageType] = {
    ClientHello: MessageType.CLIENT_HELLO,
    GetWeightsIns: MessageType.GET_WEIGHTS_INS,
    GetWeightsRes: MessageType.GET_WEIGHTS_RES,
    FitIns: MessageType.FIT_INS,
    FitRes: MessageType.FIT_RES,
    EvaluateIns: MessageType.EVALUATE_INS,
    EvaluateRes: MessageType.EVALUATE_RES,
    ReconnectIns: MessageType.RECONNECT_INS,
    DisconnectRes: MessageType.DISCONNECT_RES,
    ErrorRes: MessageType.ERROR_RES,
}


def _encode_string(out: bytearray, s: str, what: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError(f"{what} exceeds 65535 UTF-8 bytes")
    out += struct.pack("!H", len(raw))
    out += raw


def _encode_config(out: bytearray, config: ConfigMap, what: str) -> None:
    if len(config) > 0xFFFF:
        raise ProtocolError(f"{what} exceeds 65535 entries")
    out += struct.pack("!H", len(config))
    for key, value in config.items():
        _encode_string(out, key, f"{what} key")
        # bool first: bool is a subclass of int.
        if isinstance(value, bool):
            out += struct.pack("!BB", _CONFIG_TAG_BOOL, 1 if value else 0)
        elif isinstance(value, int):
            if not _I64_MIN <= value <= _I64_MAX:
                raise ProtocolError(f"{what} value for {key!r} exceeds i64 range")
            out += struct.pack("!Bq", _CONFIG_TAG_I64, value)
        elif isinstance(value, float):
            out += struct.pack("!Bd", _CONFIG_TAG_F64, value)
        elif isinstance(value, str):
            raw = value.encode("utf-8")
            out += struct.pack("!BI", _CONFIG_TAG_STR, len(raw))
            out += raw
        else:
            raise ProtocolError(f"{what} value for {key!r} has unsupported type {type(value).__name__}")


def _encode_body(m: Message, out: bytearray | None = None) -> bytearray:
    if out is None:
        out = bytearray()
    if isinstance(m, ClientHello):
        _encode_string(out, m.client_name, "client_name")
        _encode_config(out, m.capabilities, "capabilities")
    elif isinstance(m, GetWeightsIns):
        pass
    elif isinstance(m, GetWeightsRes):
        encode_weights_into(out, m.weights)
    elif isinstance(m, FitIns):
        encode_weights_into(out, m.weights)
        _encode_config(out, m.config, "config")
    elif isinstance(m, FitRes):
        if m.num_examples < 0:
            raise ProtocolError("FitRes.num_examples must be >= 0")
        encode_weights_into(out, m.weights)
        out += struct.pack("!Q", m.num_examples)
        _encode_config(out, m.metrics, "metrics")
    elif isinstance(m, EvaluateIns):
        encode_weights_into(out, m.weights)
        _encode_config(out, m.config, "config")
    elif isinstance(m, EvaluateRes):
        if m.num_examples < 1:
            raise ProtocolError("EvaluateRes.num_examples must be >= 1")
        out += struct.pack("!dQ", m.loss, m.num_examples)
        _encode_config(out, m.metrics, "metrics")
    elif isinstance(m, ReconnectIns):
        if not 0 <= m.seconds <= 0xFFFFFFFF:
            raise ProtocolError("ReconnectIns.seconds must fit u32")
        out += struct.pack("!I", m.seconds)
    elif isinstance(m, DisconnectRes):
        out += struct.pack("!B", int(DisconnectReason(m.reason)))
    elif isinstance(m, ErrorRes):
        if not 0 <= m.code <= 0xFFFF:
            raise ProtocolError("ErrorRes.code must fit u16")
        out += struct.pack("!H", m.code)
        _encode_string(out, m.detail, "detail")
    else:
        raise ProtocolError(f"not a protocol message: {type(m).__name__}")
    return out


def encode_frame(m: Message) -> bytearray:
    """Encode one message as a complete frame, without a final copy.

    The body is appended after a header-sized placeholder and the
    header patched in last, so large payloads are never re-copied.
    """
    out = bytearray(HEADER_LEN)
    _encode_body(m, out)
    body_len = len(out) - HEADER_LEN
    if body_len > MAX_BODY_LEN:
        raise ProtocolError(f"body of {body_len} bytes exceeds {MAX_BODY_LEN}")
    msg_type = _TYPE_BY_CLASS[type(m)]
    out[:HEADER_LEN] = MAGIC + struct.pack("!BBI", VERSION, int(msg_type), body_len)
    return out


def encode_message(m: Message) -> bytes:
    """Encode one message as a complete immutable frame."""
    return bytes(encode_frame(m))


class _BodyReader:
    """Cursor over one frame body; all faults report absolute offsets."""

    def __init__(self, buf: bytes, start: int, end: int):
        self.buf = buf
        self.pos = start
        self.end = end

    def need(self, n: int, what: str) -> None:
        if self.pos + n > self.end:
            raise ProtocolError(f"at byte {self.pos}: body truncated, expected {what}")

    def unpack(self, fmt: str, what: str) -> tuple:
        n = struct.calcsize(fmt)
        self.need(n, what)
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += n
        return values

    def take(self, n: int, what: str) -> bytes:
        self.need(n, what)
        raw = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return raw

    def string(self, what: str) -> str:
        (n,) = self.unpack("!H", f"{what} length")
        raw = self.take(n, f"{what} bytes")
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError(f"at byte {self.pos - n}: {what} is not valid UTF-8") from None

    def weights(self) -> Weights:
        try:
            w, self.pos = decode_weights_from(self.buf[: self.end], self.pos)
        except DecodeError as exc:
            raise ProtocolError(str(exc)) from None
        return w

    def config(self, what: str) -> ConfigMap:
        (count,) = self.unpack("!H", f"{what} entry count")
        out: ConfigMap = {}
        for _ in range(count):
            key = self.string(f"{what} key")
            if key in out:
                raise ProtocolError(f"at byte {self.pos}: duplicate {what} key {key!r}")
            (tag,) = self.unpack("!B", "value tag")
            if tag == _CONFIG_TAG_I64:
                (value,) = self.unpack("!q", "i64 value")
                out[key] = value
            elif tag == _CONFIG_TAG_F64:
                (value,) = self.unpack("!d", "f64 value")
                out[key] = value
            elif tag == _CONFIG_TAG_STR:
                (n,) = self.unpack("!I", "string value length")
                out[key] = self.take(n, "string value").decode("utf-8")
            elif tag == _CONFIG_TAG_BOOL:
                (b,) = self.unpack("!B", "bool value")
                if b not in (0, 1):
                    raise ProtocolError(f"at byte {self.pos - 1}: bool value byte {b}")
                out[key] = bool(b)
            else:
                raise ProtocolError(f"at byte {self.pos - 1}: unknown config value tag {tag}")
        return out


def _decode_body(msg_type: MessageType, buf: bytes, start: int, end: int) -> Message:
    r = _BodyReader(buf, start, end)
    m: Message
    if msg_type is MessageType.CLIENT_HELLO:
        name = r.string("client_name")
        m = ClientHello(name, r.config("capabilities"))
    elif msg_type is MessageType.GET_WEIGHTS_INS:
        m = GetWeightsIns()
    elif msg_type is MessageType.GET_WEIGHTS_RES:
        m = GetWeightsRes(r.weights())
    elif msg_type is MessageType.FIT_INS:
        w = r.weights()
        m = FitIns(w, r.config("config"))
    elif msg_type is MessageType.FIT_RES:
        w = r.weights()
        (n,) = r.unpack("!Q", "num_examples")
        m = FitRes(w, n, r.config("metrics"))
    elif msg_type is MessageType.EVALUATE_INS:
        w = r.weights()
        m = EvaluateIns(w, r.config("config"))
    elif msg_type is MessageType.EVALUATE_RES:
        loss, n = r.unpack("!dQ", "loss and num_examples")
        if n < 1:
            raise ProtocolError(f"at byte {r.pos - 8}: EvaluateRes.num_examples must be >= 1")
        m = EvaluateRes(loss, n, r.config("metrics"))
    elif msg_type is MessageType.RECONNECT_INS:
        (seconds,) = r.unpack("!I", "seconds")
        m = ReconnectIns(seconds)
    elif msg_type is MessageType.DISCONNECT_RES:
        (reason,) = r.unpack("!B", "reason")
        if reason not in DisconnectReason._value2member_map_:
            raise ProtocolError(f"at byte {r.pos - 1}: unknown disconnect reason {reason}")
        m = DisconnectRes(DisconnectReason(reason))
    elif msg_type is MessageType.ERROR_RES:
        (code,) = r.unpack("!H", "code")
        m = ErrorRes(code, r.string("detail"))
    else:  # pragma: no cover - enum is closed
        raise ProtocolError(f"unhandled message type {msg_type}")
    if r.pos != end:
        raise ProtocolError(f"at byte {r.pos}: {end - r.pos} trailing bytes in body")
    return m


def decode_message(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at ``offset``.

    Returns the message and the offset one past the frame. Raises
    NeedMoreData when the buffer ends before the frame does; raises
    ProtocolError for anything malformed. Garbage is rejected as early
    as its first wrong byte so incremental feeding behaves the same as
    decoding whole frames.
    """
    avail = len(buf) - offset
    prefix = min(avail, 4)
    if bytes(buf[offset : offset + prefix]) != MAGIC[:prefix]:
        raise ProtocolError(f"at byte {offset}: bad magic")
    if avail < 5:
        raise NeedMoreData()
    version = buf[offset + 4]
    if version != VERSION:
        raise ProtocolError(f"at byte {offset + 4}: unsupported version {version}")
    if avail < 6:
        raise NeedMoreData()
    raw_type = buf[offset + 5]
    if raw_type not in MessageType._value2member_map_:
        raise ProtocolError(f"at byte {offset + 5}: unknown message type {raw_type}")
    if avail < HEADER_LEN:
        raise NeedMoreData()
    (length,) = struct.unpack_from("!I", buf, offset + 6)
    if length > MAX_BODY_LEN:
        raise ProtocolError(f"at byte {offset + 6}: body length {length} exceeds {MAX_BODY_LEN}")
    if avail < HEADER_LEN + length:
        raise NeedMoreData()
    start = offset + HEADER_LEN
    m = _decode_body(MessageType(raw_type), bytes(buf), start, start + length)
    return m, start + length


class FrameReader:
    """Incremental frame accumulator for a byte stream.

    feed() appends whatever arrived; next_message() yields one decoded
    message or None if a full frame is not buffered yet.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def next_message(self) -> Message | None:
        try:
            m, end = decode_message(self._buf, 0)
        except NeedMoreData:
            return None
        del self._buf[:end]
        return m

    def pending_bytes(self) -> int:
        return len(self._buf)


def message_byte_size(m: Message) -> int:
    """Frame length encode_message(m) would produce.

    Weights-bearing variants dominate traffic; their size is computed
    without materializing the encoding.
    """
    if isinstance(m, (GetWeightsRes, FitIns, FitRes, EvaluateIns)):
        w_size = weights_byte_size(m.weights)
        rest = bytearray()
        if isinstance(m, (FitIns, EvaluateIns)):
            _encode_config(rest, m.config, "config")
        elif isinstance(m, FitRes):
            rest += struct.pack("!Q", m.num_examples)
            _encode_config(rest, m.metrics, "metrics")
        return HEADER_LEN + w_size + len(rest)
    return len(encode_message(m))
