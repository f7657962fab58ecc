"""MQTT 3.1.1 control-packet encoder/decoder.

Covers the packet subset a clean-session broker needs: CONNECT through
DISCONNECT, QoS 0/1/2 publish flows, subscribe/unsubscribe and pings.
All functions are pure; the decoder is incremental (feed it a growing
buffer, it tells you when it needs more bytes) and never reads past the
frame boundary declared by the remaining-length field.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAX_REMAINING_LENGTH = 268_435_455  # 4 base-128 digits, all continuation bits used
DEFAULT_MAX_FRAME = 1 << 20  # accept frames up to 1 MiB unless configured otherwise
PROTOCOL_LEVEL = 4  # MQTT 3.1.1

_U16 = struct.Struct("!H")


class QosLevel(IntEnum):
    AT_MOST_ONCE = 0
    AT_LEAST_ONCE = 1
    EXACTLY_ONCE = 2


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class ConnackCode(IntEnum):
    ACCEPTED = 0
    UNACCEPTABLE_PROTOCOL_VERSION = 1
    IDENTIFIER_REJECTED = 2
    SERVER_UNAVAILABLE = 3
    BAD_CREDENTIALS = 4
    NOT_AUTHORIZED = 5


SUBACK_FAILURE = 0x80


class WireError(Exception):
    """Base class for codec errors."""


class MalformedPacketError(WireError):
    """Received bytes that cannot be a legal MQTT 3.1.1 frame."""


class InvalidPacketError(WireError):
    """Asked to encode a packet that violates its own invariants."""


# Fixed-header flag nibble mandated per packet type (PUBLISH is dynamic).
_RESERVED_FLAGS = {
    PacketType.CONNECT: 0,
    PacketType.CONNACK: 0,
    PacketType.PUBACK: 0,
    PacketType.PUBREC: 0,
    PacketType.PUBREL: 2,
    PacketType.PUBCOMP: 0,
    PacketType.SUBSCRIBE: 2,
    PacketType.SUBACK: 0,
    PacketType.UNSUBSCRIBE: 2,
    PacketType.UNSUBACK: 0,
    PacketType.PINGREQ: 0,
    PacketType.PINGRESP: 0,
    PacketType.DISCONNECT: 0,
}


def valid_topic(topic: str) -> bool:
    """True for a publishable topic name: nonempty, no wildcards, no NUL."""
    if not topic or len(topic.encode("utf-8")) > 65535:
        return False
    return not any(c in topic for c in ("+", "#", "\x00"))


def valid_filter(topic_filter: str) -> bool:
    """True when a subscription filter obeys MQTT wildcard placement rules.

    '#' may only appear alone in the last level; '+' only alone in a level.
    """
    if not topic_filter or len(topic_filter.encode("utf-8")) > 65535:
        return False
    if "\x00" in topic_filter:
        return False
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level:
            if level != "#" or i != len(levels) - 1:
                return False
        if "+" in level and level != "+":
            return False
    return True


@dataclass(frozen=True, slots=True)
class Connect:
    client_id: str
    keepalive: int = 0
    clean_session: bool = True
    protocol_level: int = PROTOCOL_LEVEL


@dataclass(frozen=True, slots=True)
class Connack:
    return_code: int
    session_present: bool = False


@dataclass(frozen=True, slots=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    dup: bool = False
    retain: bool = False


@dataclass(frozen=True, slots=True)
class Puback:
    packet_id: int


@dataclass(frozen=True, slots=True)
class Pubrec:
    packet_id: int


@dataclass(frozen=True, slots=True)
class Pubrel:
    packet_id: int


@dataclass(frozen=True, slots=True)
class Pubcomp:
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
    Connect
    | Connack
    | Publish
    | Puback
    | Pubrec
    | Pubrel
    | Pubcomp
    | Subscribe
    | Suback
    | Unsubscribe
    | Unsuback
    | Pingreq
    | Pingresp
    | Disconnect
)


def encode_remaining_length(n: int) -> bytes:
    """Encode n as the MQTT variable-length integer (1-4 bytes)."""
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise InvalidPacketError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n > 0:
            digit |= 0x80
        out.append(digit)
        if n == 0:
            return bytes(out)


def decode_remaining_length(data: bytes | bytearray | memoryview) -> tuple[int, int] | None:
    """Decode a variable-length integer.

    Returns (value, bytes consumed), or None when the input is truncated.
    Raises MalformedPacketError if a fourth byte still has its
    continuation bit set.
    """
    value = 0
    multiplier = 1
    for i, byte in enumerate(data):
        if i == 4:
            raise MalformedPacketError("remaining length exceeds 4 bytes")
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, i + 1
        multiplier *= 128
    if len(data) >= 4:
        raise MalformedPacketError("remaining length exceeds 4 bytes")
    return None


def _utf8(value: str) -> bytes:
    data = value.encode("utf-8")
    if len(data) > 65535:
        raise InvalidPacketError("string exceeds 65535 bytes")
    return _U16.pack(len(data)) + data


def _check_packet_id(packet_id: int) -> int:
    if not 1 <= packet_id <= 65535:
        raise InvalidPacketError(f"packet id {packet_id} out of range")
    return packet_id


def encode_packet(packet: Packet) -> bytes:
    """Serialize a packet to its MQTT 3.1.1 wire form.

    Raises InvalidPacketError when the packet violates its invariants
    (e.g. QoS > 0 without a packet id, wildcard in a PUBLISH topic).
    """
    if isinstance(packet, Connect):
        if packet.clean_session is False and not packet.client_id:
            raise InvalidPacketError("empty client id requires clean session")
        if not 0 <= packet.keepalive <= 65535:
            raise InvalidPacketError("keepalive out of range")
        flags = 0x02 if packet.clean_session else 0x00
        body = (
            _utf8("MQTT")
            + bytes([packet.protocol_level & 0xFF, flags])
            + _U16.pack(packet.keepalive)
            + _utf8(packet.client_id)
        )
        return _frame(PacketType.CONNECT, 0, body)

    if isinstance(packet, Connack):
        if not 0 <= packet.return_code <= 255:
            raise InvalidPacketError("connack return code out of range")
        body = bytes([1 if packet.session_present else 0, packet.return_code])
        return _frame(PacketType.CONNACK, 0, body)

    if isinstance(packet, Publish):
        if packet.qos not in (0, 1, 2):
            raise InvalidPacketError(f"invalid qos {packet.qos}")
        if not valid_topic(packet.topic):
            raise InvalidPacketError(f"invalid publish topic {packet.topic!r}")
        if packet.qos > 0:
            if packet.packet_id is None:
                raise InvalidPacketError("qos > 0 publish requires a packet id")
            _check_packet_id(packet.packet_id)
        elif packet.packet_id is not None:
            raise InvalidPacketError("qos 0 publish must not carry a packet id")
        flags = (0x08 if packet.dup else 0) | (packet.qos << 1) | (0x01 if packet.retain else 0)
        body = _utf8(packet.topic)
        if packet.qos > 0:
            body += _U16.pack(packet.packet_id)
        body += bytes(packet.payload)
        return _frame(PacketType.PUBLISH, flags, body)

    if isinstance(packet, (Puback, Pubrec, Pubrel, Pubcomp, Unsuback)):
        ptype = {
            Puback: PacketType.PUBACK,
            Pubrec: PacketType.PUBREC,
            Pubrel: PacketType.PUBREL,
            Pubcomp: PacketType.PUBCOMP,
            Unsuback: PacketType.UNSUBACK,
        }[type(packet)]
        _check_packet_id(packet.packet_id)
        return _frame(ptype, _RESERVED_FLAGS[ptype], _U16.pack(packet.packet_id))

    if isinstance(packet, Subscribe):
        _check_packet_id(packet.packet_id)
        if not packet.filters:
            raise InvalidPacketError("subscribe requires at least one filter")
        body = bytearray(_U16.pack(packet.packet_id))
        for topic_filter, qos in packet.filters:
            if not valid_filter(topic_filter):
                raise InvalidPacketError(f"invalid topic filter {topic_filter!r}")
            if qos not in (0, 1, 2):
                raise InvalidPacketError(f"invalid requested qos {qos}")
            body += _utf8(topic_filter)
            body.append(qos)
        return _frame(PacketType.SUBSCRIBE, 2, bytes(body))

    if isinstance(packet, Suback):
        _check_packet_id(packet.packet_id)
        if not packet.return_codes:
            raise InvalidPacketError("suback requires at least one return code")
        for code in packet.return_codes:
            if code not in (0, 1, 2, SUBACK_FAILURE):
                raise InvalidPacketError(f"invalid suback code {code:#x}")
        body = _U16.pack(packet.packet_id) + bytes(packet.return_codes)
        return _frame(PacketType.SUBACK, 0, body)

    if isinstance(packet, Unsubscribe):
        _check_packet_id(packet.packet_id)
        if not packet.filters:
            raise InvalidPacketError("unsubscribe requires at least one filter")
        body = bytearray(_U16.pack(packet.packet_id))
        for topic_filter in packet.filters:
            if not valid_filter(topic_filter):
                raise InvalidPacketError(f"invalid topic filter {topic_filter!r}")
            body += _utf8(topic_filter)
        return _frame(PacketType.UNSUBSCRIBE, 2, bytes(body))

    if isinstance(packet, Pingreq):
        return b"\xc0\x00"
    if isinstance(packet, Pingresp):
        return b"\xd0\x00"
    if isinstance(packet, Disconnect):
        return b"\xe0\x00"

    raise InvalidPacketError(f"unknown packet {packet!r}")


def _frame(ptype: PacketType, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


class _Reader:
    """Cursor over one frame body; every read is bounds-checked."""

    __slots__ = ("data", "pos")

    def __init__(self, data: memoryview):
        self.data = data
        self.pos = 0

    def u8(self) -> int:
        if self.pos + 1 > len(self.data):
            raise MalformedPacketError("frame body truncated")
        value = self.data[self.pos]
        self.pos += 1
        return value

    def u16(self) -> int:
        if self.pos + 2 > len(self.data):
            raise MalformedPacketError("frame body truncated")
        value = (self.data[self.pos] << 8) | self.data[self.pos + 1]
        self.pos += 2
        return value

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPacketError("frame body truncated")
        value = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return value

    def utf8(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacketError(f"invalid utf-8 string: {exc}") from None

    def rest(self) -> bytes:
        value = bytes(self.data[self.pos :])
        self.pos = len(self.data)
        return value

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def packet_id(self) -> int:
        pid = self.u16()
        if pid == 0:
            raise MalformedPacketError("packet id must be nonzero")
        return pid


def decode_packet(
    buffer: bytes | bytearray | memoryview, max_remaining_length: int = DEFAULT_MAX_FRAME
) -> tuple[Packet, int] | None:
    """Decode one packet from the head of buffer.

    Returns (packet, bytes consumed), or None when the buffer holds only
    part of a frame. Raises MalformedPacketError for byte sequences that
    can never become a legal frame.
    """
    view = memoryview(buffer)
    if len(view) == 0:
        return None
    first = view[0]
    type_bits = first >> 4
    flags = first & 0x0F
    if type_bits == 0 or type_bits == 15:
        raise MalformedPacketError(f"reserved packet type {type_bits}")
    ptype = PacketType(type_bits)

    if ptype == PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos == 3:
            raise MalformedPacketError("publish qos bits set to 3")
    elif flags != _RESERVED_FLAGS[ptype]:
        raise MalformedPacketError(f"bad flags {flags:#x} for {ptype.name}")

    decoded_length = decode_remaining_length(view[1:5])
    if decoded_length is None:
        return None
    remaining, length_bytes = decoded_length
    if remaining > max_remaining_length:
        raise MalformedPacketError(f"frame of {remaining} bytes exceeds limit {max_remaining_length}")
    frame_len = 1 + length_bytes + remaining
    if len(view) < frame_len:
        return None

    body = _Reader(view[1 + length_bytes : frame_len])
    packet = _decode_body(ptype, flags, body)
    if not body.at_end():
        raise MalformedPacketError(f"{ptype.name} frame has {len(body.data) - body.pos} trailing bytes")
    return packet, frame_len


def _decode_body(ptype: PacketType, flags: int, body: _Reader) -> Packet:
    if ptype == PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        topic = body.utf8()
        if not valid_topic(topic):
            raise MalformedPacketError(f"invalid publish topic {topic!r}")
        packet_id = body.packet_id() if qos > 0 else None
        return Publish(
            topic=topic,
            payload=body.rest(),
            qos=qos,
            packet_id=packet_id,
            dup=bool(flags & 0x08),
            retain=bool(flags & 0x01),
        )

    if ptype == PacketType.CONNECT:
        return _decode_connect(body)

    if ptype == PacketType.CONNACK:
        ack_flags = body.u8()
        if ack_flags & 0xFE:
            raise MalformedPacketError("reserved connack flags set")
        return Connack(return_code=body.u8(), session_present=bool(ack_flags & 0x01))

    if ptype in (PacketType.PUBACK, PacketType.PUBREC, PacketType.PUBREL, PacketType.PUBCOMP, PacketType.UNSUBACK):
        cls = {
            PacketType.PUBACK: Puback,
            PacketType.PUBREC: Pubrec,
            PacketType.PUBREL: Pubrel,
            PacketType.PUBCOMP: Pubcomp,
            PacketType.UNSUBACK: Unsuback,
        }[ptype]
        return cls(packet_id=body.packet_id())

    if ptype == PacketType.SUBSCRIBE:
        packet_id = body.packet_id()
        filters: list[tuple[str, int]] = []
        while not body.at_end():
            topic_filter = body.utf8()
            qos = body.u8()
            if qos > 2:
                raise MalformedPacketError(f"requested qos {qos} out of range")
            filters.append((topic_filter, qos))
        return Subscribe(packet_id=packet_id, filters=tuple(filters))

    if ptype == PacketType.SUBACK:
        packet_id = body.packet_id()
        codes = body.rest()
        for code in codes:
            if code not in (0, 1, 2, SUBACK_FAILURE):
                raise MalformedPacketError(f"invalid suback code {code:#x}")
        return Suback(packet_id=packet_id, return_codes=tuple(codes))

    if ptype == PacketType.UNSUBSCRIBE:
        packet_id = body.packet_id()
        names: list[str] = []
        while not body.at_end():
            names.append(body.utf8())
        return Unsubscribe(packet_id=packet_id, filters=tuple(names))

    if ptype == PacketType.PINGREQ:
        return Pingreq()
    if ptype == PacketType.PINGRESP:
        return Pingresp()
    if ptype == PacketType.DISCONNECT:
        return Disconnect()

    raise MalformedPacketError(f"unsupported packet type {ptype}")  # pragma: no cover


def _decode_connect(body: _Reader) -> Connect:
    name = body.take(body.u16())
    if name not in (b"MQTT", b"MQIsdp"):
        raise MalformedPacketError(f"unknown protocol name {name!r}")
    level = body.u8()
    flags = body.u8()
    if flags & 0x01:
        raise MalformedPacketError("connect reserved flag set")
    clean_session = bool(flags & 0x02)
    will = bool(flags & 0x04)
    will_qos = (flags >> 3) & 0x03
    will_retain = bool(flags & 0x20)
    has_password = bool(flags & 0x40)
    has_username = bool(flags & 0x80)
    if not will and (will_qos or will_retain):
        raise MalformedPacketError("will qos/retain set without will flag")
    if will_qos == 3:
        raise MalformedPacketError("will qos 3")
    if has_password and not has_username:
        raise MalformedPacketError("password flag without username flag")
    keepalive = body.u16()
    client_id = body.utf8()
    # Will and credential fields are parsed for frame consistency but not
    # retained; this broker supports neither feature.
    if will:
        body.utf8()
        body.take(body.u16())
    if has_username:
        body.utf8()
    if has_password:
        body.take(body.u16())
    return Connect(
        client_id=client_id,
        keepalive=keepalive,
        clean_session=clean_session,
        protocol_level=level,
    )


class StreamDecoder:
    """Incremental framing over a byte stream.

    feed() buffers arbitrary chunks and yields every complete packet.
    Raises MalformedPacketError exactly where decode_packet would.
    """

    __slots__ = ("_buffer", "_offset", "max_remaining_length")

    def __init__(self, max_remaining_length: int = DEFAULT_MAX_FRAME):
        self._buffer = bytearray()
        self._offset = 0
        self.max_remaining_length = max_remaining_length

    def feed(self, data: bytes) -> list[Packet]:
        self._buffer += data
        packets: list[Packet] = []
        view = memoryview(self._buffer)
        while True:
            result = decode_packet(view[self._offset :], self.max_remaining_length)
            if result is None:
                break
            packet, consumed = result
            packets.append(packet)
            self._offset += consumed
        del view
        if self._offset and (self._offset > 65536 or self._offset == len(self._buffer)):
            del self._buffer[: self._offset]
            self._offset = 0
        return packets

    @property
    def pending_bytes(self) -> int:
        return len(self._buffer) - self._offset
