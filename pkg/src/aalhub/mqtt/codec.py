"""Bit-exact encoder/decoder for the MQTT 3.1.1 subset used across the stack.

Supported control packets: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK,
SUBSCRIBE, SUBACK, UNSUBSCRIBE, UNSUBACK, PINGREQ, PINGRESP, DISCONNECT.
QoS 2, will messages and username/password auth are deliberately rejected at
decode time so unsupported traffic fails loudly instead of being silently
misread.

All functions are pure and stateless; :class:`StreamDecoder` only buffers
bytes and may be used one-per-connection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

from .topics import (
    InvalidFilterError,
    InvalidTopicError,
    validate_filter,
    validate_topic,
)

#: Largest value representable by the variable-length remaining-length field.
MAX_REMAINING_LENGTH = 268_435_455

#: Decode-side guard against pathological frames; callers may widen it up to
#: MAX_REMAINING_LENGTH.
DEFAULT_MAX_PACKET_BYTES = 262_144

MAX_PACKET_ID = 0xFFFF
MAX_STRING_BYTES = 0xFFFF

#: SUBACK return code signalling a refused subscription.
SUBACK_FAILURE = 0x80

CONNACK_ACCEPTED = 0
CONNACK_IDENTIFIER_REJECTED = 2


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class CodecError(Exception):
    """Base class for wire codec failures."""


class InvalidPacketError(CodecError):
    """Encode-side packet violates an invariant; ``field`` names the culprit."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name


class MalformedPacketError(CodecError):
    """Decode-side framing or content error.  Connection-fatal."""


@dataclass(frozen=True, slots=True)
class Connect:
    client_id: str
    clean_session: bool = True
    keepalive: int = 0


@dataclass(frozen=True, slots=True)
class Connack:
    session_present: bool = False
    return_code: int = CONNACK_ACCEPTED


@dataclass(frozen=True, slots=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    retain: bool = False
    dup: bool = False
    packet_id: int | None = None


@dataclass(frozen=True, slots=True)
class Puback:
    packet_id: int


@dataclass(frozen=True, slots=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...]


@dataclass(frozen=True, slots=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class Unsubscribe:
    packet_id: int
    filters: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class Unsuback:
    packet_id: int


@dataclass(frozen=True, slots=True)
class Pingreq:
    pass


@dataclass(frozen=True, slots=True)
class Pingresp:
    pass


@dataclass(frozen=True, slots=True)
class Disconnect:
    pass


Packet = (
    Connect | Connack | Publish | Puback | Subscribe | Suback
    | Unsubscribe | Unsuback | Pingreq | Pingresp | Disconnect
)

PACKET_TYPE_OF = {
    Connect: PacketType.CONNECT,
    Connack: PacketType.CONNACK,
    Publish: PacketType.PUBLISH,
    Puback: PacketType.PUBACK,
    Subscribe: PacketType.SUBSCRIBE,
    Suback: PacketType.SUBACK,
    Unsubscribe: PacketType.UNSUBSCRIBE,
    Unsuback: PacketType.UNSUBACK,
    Pingreq: PacketType.PINGREQ,
    Pingresp: PacketType.PINGRESP,
    Disconnect: PacketType.DISCONNECT,
}

# Fixed-header flag nibble required for every non-PUBLISH type.
_RESERVED_FLAGS = {
    PacketType.CONNECT: 0x0,
    PacketType.CONNACK: 0x0,
    PacketType.PUBACK: 0x0,
    PacketType.SUBSCRIBE: 0x2,
    PacketType.SUBACK: 0x0,
    PacketType.UNSUBSCRIBE: 0x2,
    PacketType.UNSUBACK: 0x0,
    PacketType.PINGREQ: 0x0,
    PacketType.PINGRESP: 0x0,
    PacketType.DISCONNECT: 0x0,
}

_PROTOCOL_NAME = b"\x00\x04MQTT"
_PROTOCOL_LEVEL = 4


def encode_remaining_length(n: int) -> bytes:
    """Variable-length encode ``n``: 7 bits per byte, continuation bit on all
    but the last byte.  Always the minimal encoding."""
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise InvalidPacketError("remaining_length", f"out of range: {n}")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n > 0:
            byte |= 0x80
        out.append(byte)
        if n == 0:
            return bytes(out)


def decode_remaining_length(data: bytes | memoryview) -> tuple[int, int] | None:
    """Decode the remaining-length field at the start of ``data``.

    Returns ``(value, bytes_consumed)`` or ``None`` if more bytes are needed.
    Rejects over-long (non-minimal) encodings and fields beyond 4 bytes.
    """
    value = 0
    multiplier = 1
    for i in range(4):
        if i >= len(data):
            return None
        byte = data[i]
        value += (byte & 0x7F) * multiplier
        multiplier *= 128
        if not byte & 0x80:
            if i > 0 and byte == 0:
                raise MalformedPacketError(
                    "over-long remaining-length encoding")
            return value, i + 1
    raise MalformedPacketError("remaining-length field exceeds 4 bytes")


def _encode_string(value: str, field_name: str) -> bytes:
    data = value.encode("utf-8")
    if len(data) > MAX_STRING_BYTES:
        raise InvalidPacketError(field_name, "UTF-8 form exceeds 65535 bytes")
    return len(data).to_bytes(2, "big") + data


def _check_packet_id(packet_id: int, field_name: str = "packet_id") -> int:
    if not 1 <= packet_id <= MAX_PACKET_ID:
        raise InvalidPacketError(field_name, f"must be in 1..65535: {packet_id}")
    return packet_id


def encode_packet(packet: Packet) -> bytes:
    """Return the unique minimal wire encoding of ``packet``.

    Raises :class:`InvalidPacketError` naming the offending field when the
    packet violates a subset invariant.
    """
    flags = 0x0
    body = bytearray()

    if isinstance(packet, Connect):
        body += _PROTOCOL_NAME
        body.append(_PROTOCOL_LEVEL)
        body.append(0x02 if packet.clean_session else 0x00)
        if not 0 <= packet.keepalive <= 0xFFFF:
            raise InvalidPacketError("keepalive", f"out of range: {packet.keepalive}")
        body += packet.keepalive.to_bytes(2, "big")
        body += _encode_string(packet.client_id, "client_id")
    elif isinstance(packet, Connack):
        if packet.return_code not in range(6):
            raise InvalidPacketError("return_code", f"unknown code: {packet.return_code}")
        if packet.session_present and packet.return_code != CONNACK_ACCEPTED:
            raise InvalidPacketError("session_present", "must be 0 on refusal")
        body.append(0x01 if packet.session_present else 0x00)
        body.append(packet.return_code)
    elif isinstance(packet, Publish):
        if packet.qos not in (0, 1):
            raise InvalidPacketError("qos", f"only QoS 0/1 supported: {packet.qos}")
        if packet.dup and packet.qos == 0:
            raise InvalidPacketError("dup", "DUP must be 0 for QoS 0")
        try:
            validate_topic(packet.topic)
        except InvalidTopicError as exc:
            raise InvalidPacketError("topic", str(exc)) from None
        if (packet.packet_id is not None) != (packet.qos > 0):
            raise InvalidPacketError("packet_id", "present iff QoS > 0")
        flags = (packet.dup << 3) | (packet.qos << 1) | int(packet.retain)
        body += _encode_string(packet.topic, "topic")
        if packet.qos > 0:
            body += _check_packet_id(packet.packet_id).to_bytes(2, "big")
        body += packet.payload
    elif isinstance(packet, (Puback, Unsuback)):
        body += _check_packet_id(packet.packet_id).to_bytes(2, "big")
    elif isinstance(packet, Subscribe):
        if not packet.filters:
            raise InvalidPacketError("filters", "at least one filter required")
        body += _check_packet_id(packet.packet_id).to_bytes(2, "big")
        for filter_, qos in packet.filters:
            try:
                validate_filter(filter_)
            except InvalidFilterError as exc:
                raise InvalidPacketError("filters", str(exc)) from None
            if qos not in (0, 1):
                raise InvalidPacketError("filters", f"requested QoS must be 0/1: {qos}")
            body += _encode_string(filter_, "filters")
            body.append(qos)
    elif isinstance(packet, Suback):
        if not packet.return_codes:
            raise InvalidPacketError("return_codes", "at least one code required")
        body += _check_packet_id(packet.packet_id).to_bytes(2, "big")
        for code in packet.return_codes:
            if code not in (0, 1, SUBACK_FAILURE):
                raise InvalidPacketError("return_codes", f"unknown code: {code}")
            body.append(code)
    elif isinstance(packet, Unsubscribe):
        if not packet.filters:
            raise InvalidPacketError("filters", "at least one filter required")
        body += _check_packet_id(packet.packet_id).to_bytes(2, "big")
        for filter_ in packet.filters:
            try:
                validate_filter(filter_)
            except InvalidFilterError as exc:
                raise InvalidPacketError("filters", str(exc)) from None
            body += _encode_string(filter_, "filters")
    elif isinstance(packet, (Pingreq, Pingresp, Disconnect)):
        pass
    else:
        raise InvalidPacketError("packet", f"not a known packet type: {packet!r}")

    ptype = PACKET_TYPE_OF[type(packet)]
    if ptype != PacketType.PUBLISH:
        flags = _RESERVED_FLAGS[ptype]
    first = (ptype << 4) | flags
    return bytes([first]) + encode_remaining_length(len(body)) + bytes(body)


class _Reader:
    """Cursor over one packet body; every read checks bounds."""

    __slots__ = ("data", "pos")

    def __init__(self, data: memoryview):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def read(self, n: int) -> memoryview:
        if self.remaining() < n:
            raise MalformedPacketError("packet body truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        chunk = self.read(2)
        return (chunk[0] << 8) | chunk[1]

    def string(self, field_name: str) -> str:
        length = self.u16()
        raw = self.read(length)
        try:
            return str(raw, "utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacketError(f"{field_name}: invalid UTF-8: {exc}") from None

    def rest(self) -> bytes:
        chunk = bytes(self.data[self.pos:])
        self.pos = len(self.data)
        return chunk

    def expect_exhausted(self) -> None:
        if self.remaining():
            raise MalformedPacketError(
                f"{self.remaining()} unexpected trailing bytes in packet body")


def _decode_connect(reader: _Reader) -> Connect:
    if bytes(reader.read(6)) != _PROTOCOL_NAME:
        raise MalformedPacketError("protocol name is not 'MQTT'")
    level = reader.read(1)[0]
    if level != _PROTOCOL_LEVEL:
        raise MalformedPacketError(f"unsupported protocol level {level}")
    connect_flags = reader.read(1)[0]
    if connect_flags & 0x01:
        raise MalformedPacketError("CONNECT reserved flag bit set")
    if connect_flags & 0xFC:
        raise MalformedPacketError(
            "will/username/password flags are outside the supported subset")
    keepalive = reader.u16()
    client_id = reader.string("client_id")
    return Connect(client_id=client_id,
                   clean_session=bool(connect_flags & 0x02),
                   keepalive=keepalive)


def _decode_publish(reader: _Reader, flags: int) -> Publish:
    qos = (flags >> 1) & 0x3
    if qos == 2:
        raise MalformedPacketError("QoS 2 is outside the supported subset")
    if qos == 3:
        raise MalformedPacketError("invalid QoS 3")
    dup = bool(flags & 0x8)
    if dup and qos == 0:
        raise MalformedPacketError("DUP set on a QoS 0 PUBLISH")
    topic = reader.string("topic")
    try:
        validate_topic(topic)
    except InvalidTopicError as exc:
        raise MalformedPacketError(str(exc)) from None
    packet_id = None
    if qos > 0:
        packet_id = reader.u16()
        if packet_id == 0:
            raise MalformedPacketError("packet id 0 on a QoS 1 PUBLISH")
    return Publish(topic=topic, payload=reader.rest(), qos=qos,
                   retain=bool(flags & 0x1), dup=dup, packet_id=packet_id)


def _decode_subscribe(reader: _Reader) -> Subscribe:
    packet_id = _read_nonzero_packet_id(reader)
    filters: list[tuple[str, int]] = []
    while reader.remaining():
        filter_ = reader.string("filter")
        _validate_decoded_filter(filter_)
        qos = reader.read(1)[0]
        if qos not in (0, 1):
            raise MalformedPacketError(
                f"requested QoS {qos} is outside the supported subset")
        filters.append((filter_, qos))
    if not filters:
        raise MalformedPacketError("SUBSCRIBE with empty filter list")
    return Subscribe(packet_id=packet_id, filters=tuple(filters))


def _decode_suback(reader: _Reader) -> Suback:
    packet_id = _read_nonzero_packet_id(reader)
    codes = []
    for byte in bytes(reader.rest()):
        if byte not in (0, 1, SUBACK_FAILURE):
            raise MalformedPacketError(f"unknown SUBACK return code {byte:#x}")
        codes.append(byte)
    if not codes:
        raise MalformedPacketError("SUBACK with no return codes")
    return Suback(packet_id=packet_id, return_codes=tuple(codes))


def _decode_unsubscribe(reader: _Reader) -> Unsubscribe:
    packet_id = _read_nonzero_packet_id(reader)
    filters = []
    while reader.remaining():
        filter_ = reader.string("filter")
        _validate_decoded_filter(filter_)
        filters.append(filter_)
    if not filters:
        raise MalformedPacketError("UNSUBSCRIBE with empty filter list")
    return Unsubscribe(packet_id=packet_id, filters=tuple(filters))


def _validate_decoded_filter(filter_: str) -> None:
    try:
        validate_filter(filter_)
    except InvalidFilterError as exc:
        raise MalformedPacketError(str(exc)) from None


def _read_nonzero_packet_id(reader: _Reader) -> int:
    packet_id = reader.u16()
    if packet_id == 0:
        raise MalformedPacketError("packet id must be nonzero")
    return packet_id


def decode_packet(
    data: bytes | bytearray | memoryview,
    *,
    max_packet_bytes: int = DEFAULT_MAX_PACKET_BYTES,
) -> tuple[Packet, int] | None:
    """Decode one packet from the front of ``data``.

    Returns ``(packet, bytes_consumed)``, or ``None`` when the buffer holds
    only a packet prefix.  Raises :class:`MalformedPacketError` on any framing
    or content violation; such errors are connection-fatal for callers.
    """
    view = memoryview(bytes(data) if isinstance(data, bytearray) else data)
    if len(view) < 1:
        return None
    first = view[0]
    type_value = first >> 4
    flags = first & 0x0F
    try:
        ptype = PacketType(type_value)
    except ValueError:
        raise MalformedPacketError(
            f"unsupported control packet type {type_value}") from None

    decoded = decode_remaining_length(view[1:])
    if decoded is None:
        return None
    remaining, header_len = decoded
    if remaining > max_packet_bytes:
        raise MalformedPacketError(
            f"remaining length {remaining} exceeds limit {max_packet_bytes}")
    total = 1 + header_len + remaining
    if len(view) < total:
        return None

    if ptype != PacketType.PUBLISH and flags != _RESERVED_FLAGS[ptype]:
        raise MalformedPacketError(
            f"reserved flag bits {flags:#x} invalid for {ptype.name}")

    reader = _Reader(view[1 + header_len:total])
    packet: Packet
    if ptype == PacketType.CONNECT:
        packet = _decode_connect(reader)
    elif ptype == PacketType.CONNACK:
        ack_flags = reader.read(1)[0]
        if ack_flags & 0xFE:
            raise MalformedPacketError("CONNACK reserved ack flags set")
        return_code = reader.read(1)[0]
        if return_code not in range(6):
            raise MalformedPacketError(f"unknown CONNACK return code {return_code}")
        if ack_flags and return_code != CONNACK_ACCEPTED:
            raise MalformedPacketError("session_present set on refused CONNACK")
        packet = Connack(session_present=bool(ack_flags), return_code=return_code)
    elif ptype == PacketType.PUBLISH:
        packet = _decode_publish(reader, flags)
    elif ptype == PacketType.PUBACK:
        packet = Puback(packet_id=_read_nonzero_packet_id(reader))
    elif ptype == PacketType.SUBSCRIBE:
        packet = _decode_subscribe(reader)
    elif ptype == PacketType.SUBACK:
        packet = _decode_suback(reader)
    elif ptype == PacketType.UNSUBSCRIBE:
        packet = _decode_unsubscribe(reader)
    elif ptype == PacketType.UNSUBACK:
        packet = Unsuback(packet_id=_read_nonzero_packet_id(reader))
    elif ptype == PacketType.PINGREQ:
        packet = Pingreq()
    elif ptype == PacketType.PINGRESP:
        packet = Pingresp()
    else:
        packet = Disconnect()

    reader.expect_exhausted()
    return packet, total


class StreamDecoder:
    """Incremental decoder for a TCP byte stream.

    ``feed`` accepts arbitrary chunking and returns every packet completed by
    the new bytes, in stream order.  A :class:`MalformedPacketError` poisons
    the decoder: the connection must be dropped.
    """

    def __init__(self, *, max_packet_bytes: int = DEFAULT_MAX_PACKET_BYTES):
        self._buffer = bytearray()
        self._max_packet_bytes = max_packet_bytes

    def feed(self, data: bytes) -> list[Packet]:
        self._buffer.extend(data)
        packets: list[Packet] = []
        while self._buffer:
            result = decode_packet(bytes(self._buffer),
                                   max_packet_bytes=self._max_packet_bytes)
            if result is None:
                break
            packet, consumed = result
            del self._buffer[:consumed]
            packets.append(packet)
        return packets

    @property
    def pending_bytes(self) -> int:
        return len(self._buffer)
