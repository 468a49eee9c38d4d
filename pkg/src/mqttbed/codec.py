"""MQTT wire codec: packet values plus bit-exact encode/decode.

Supports protocol level 4 (MQTT 3.1.1) and a minimal subset of level 5
(MQTT 5.0): property blocks are carried as opaque bytes and reason codes
are restricted to the values the broker actually emits. QoS 2 is rejected
on both encode and decode.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

MAX_VARINT = 268_435_455
MAX_REMAINING_LENGTH = 1 << 20  # default decode bound, configurable per call

_U16 = struct.Struct("!H")


class MQTTError(Exception):
    """Base class for codec failures."""


class EncodeError(MQTTError):
    """A packet violates an encoding invariant and cannot be serialized."""


class MalformedPacketError(MQTTError):
    """Input bytes cannot be a valid packet (connection-fatal by broker policy)."""


class PacketTooLargeError(MalformedPacketError):
    """Remaining length exceeds the configured acceptance bound."""


class NeedMoreData(MQTTError):
    """Input is a strict prefix of a valid packet; the caller should buffer more."""


class PacketType(enum.IntEnum):
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


def encode_varint(value: int) -> bytes:
    """Encode a variable byte integer (1-4 bytes, 7 payload bits per byte)."""
    if not 0 <= value <= MAX_VARINT:
        raise EncodeError(f"varint out of range: {value}")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode a variable byte integer starting at *offset*.

    Returns (value, bytes consumed). Raises NeedMoreData on a truncated
    sequence and MalformedPacketError when a fifth continuation byte
    appears.
    """
    value = 0
    shift = 0
    consumed = 0
    for i in range(offset, len(data)):
        byte = data[i]
        consumed += 1
        if consumed > 4:
            raise MalformedPacketError("varint longer than 4 bytes")
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, consumed
        shift += 7
    if consumed >= 4:
        raise MalformedPacketError("varint longer than 4 bytes")
    raise NeedMoreData("truncated varint")


@dataclass(frozen=True)
class Connect:
    client_id: str
    protocol_level: int = 5
    keep_alive: int = 0
    clean_start: bool = True


@dataclass(frozen=True)
class Connack:
    session_present: bool = False
    reason_code: int = 0


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    retain: bool = False
    dup: bool = False
    packet_id: int | None = None
    properties: bytes = b""  # raw level-5 property block, without its length prefix


@dataclass(frozen=True)
class Puback:
    packet_id: int
    reason_code: int = 0


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    entries: tuple[tuple[str, int], ...]  # (topic filter, requested qos)


@dataclass(frozen=True)
class Suback:
    packet_id: int
    reason_codes: tuple[int, ...]


@dataclass(frozen=True)
class Unsubscribe:
    packet_id: int
    filters: tuple[str, ...]


@dataclass(frozen=True)
class Unsuback:
    packet_id: int
    reason_codes: tuple[int, ...] = ()  # empty at protocol level 4


@dataclass(frozen=True)
class Pingreq:
    pass


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    reason_code: int = 0


Packet = (
    Connect
    | Connack
    | Publish
    | Puback
    | Subscribe
    | Suback
    | Unsubscribe
    | Unsuback
    | Pingreq
    | Pingresp
    | Disconnect
)


def _encode_string(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise EncodeError("string exceeds 65535 bytes")
    return _U16.pack(len(data)) + data


def _check_topic_name(topic: str) -> None:
    if not topic:
        raise EncodeError("publish topic must be nonempty")
    if "+" in topic or "#" in topic:
        raise EncodeError("publish topic must not contain wildcards")
    if "\x00" in topic:
        raise EncodeError("publish topic must not contain NUL")


def _props_block(properties: bytes) -> bytes:
    return encode_varint(len(properties)) + properties


def _fixed_header(first_byte: int, body: bytes) -> bytes:
    if len(body) > MAX_VARINT:
        raise EncodeError("remaining length exceeds 268435455")
    return bytes([first_byte]) + encode_varint(len(body)) + body


def encode_packet(packet: Packet, protocol_level: int = 5) -> bytes:
    """Serialize *packet* for the given protocol level.

    A Connect packet carries its own level, which overrides the argument.
    Raises EncodeError naming the violated invariant.
    """
    if isinstance(packet, Connect):
        protocol_level = packet.protocol_level
    if protocol_level not in (4, 5):
        raise EncodeError(f"unsupported protocol level: {protocol_level}")
    v5 = protocol_level == 5

    if isinstance(packet, Publish):
        if packet.qos not in (0, 1):
            raise EncodeError("qos must be 0 or 1 (qos 2 unsupported)")
        if packet.qos == 0:
            if packet.packet_id is not None:
                raise EncodeError("qos 0 publish must not carry a packet id")
            if packet.dup:
                raise EncodeError("qos 0 publish must not set dup")
        else:
            if not packet.packet_id or not 0 < packet.packet_id <= 0xFFFF:
                raise EncodeError("qos 1 publish requires a nonzero 16-bit packet id")
        if packet.properties and not v5:
            raise EncodeError("properties require protocol level 5")
        _check_topic_name(packet.topic)
        first = 0x30 | (packet.dup << 3) | (packet.qos << 1) | packet.retain
        body = _encode_string(packet.topic)
        if packet.qos:
            body += _U16.pack(packet.packet_id)
        if v5:
            body += _props_block(packet.properties)
        body += packet.payload
        return _fixed_header(first, body)

    if isinstance(packet, Connect):
        client_id = packet.client_id.encode("utf-8")
        if len(client_id) > 0xFFFF:
            raise EncodeError("client id exceeds 65535 bytes")
        if not 0 <= packet.keep_alive <= 0xFFFF:
            raise EncodeError("keep alive out of range")
        flags = 0x02 if packet.clean_start else 0x00
        body = _encode_string("MQTT")
        body += bytes([protocol_level, flags])
        body += _U16.pack(packet.keep_alive)
        if v5:
            body += _props_block(b"")
        body += _U16.pack(len(client_id)) + client_id
        return _fixed_header(0x10, body)

    if isinstance(packet, Connack):
        body = bytes([0x01 if packet.session_present else 0x00, packet.reason_code])
        if v5:
            body += _props_block(b"")
        return _fixed_header(0x20, body)

    if isinstance(packet, Puback):
        _check_packet_id(packet.packet_id)
        # Level 5 permits the two-byte form when the reason code is 0.
        if v5 and packet.reason_code:
            body = _U16.pack(packet.packet_id) + bytes([packet.reason_code])
        else:
            body = _U16.pack(packet.packet_id)
        return _fixed_header(0x40, body)

    if isinstance(packet, Subscribe):
        _check_packet_id(packet.packet_id)
        if not packet.entries:
            raise EncodeError("subscribe requires at least one entry")
        body = _U16.pack(packet.packet_id)
        if v5:
            body += _props_block(b"")
        for topic_filter, qos in packet.entries:
            if qos not in (0, 1, 2):
                raise EncodeError(f"invalid requested qos: {qos}")
            body += _encode_string(topic_filter) + bytes([qos])
        return _fixed_header(0x82, body)

    if isinstance(packet, Suback):
        _check_packet_id(packet.packet_id)
        if not packet.reason_codes:
            raise EncodeError("suback requires at least one reason code")
        body = _U16.pack(packet.packet_id)
        if v5:
            body += _props_block(b"")
        body += bytes(packet.reason_codes)
        return _fixed_header(0x90, body)

    if isinstance(packet, Unsubscribe):
        _check_packet_id(packet.packet_id)
        if not packet.filters:
            raise EncodeError("unsubscribe requires at least one filter")
        body = _U16.pack(packet.packet_id)
        if v5:
            body += _props_block(b"")
        for topic_filter in packet.filters:
            body += _encode_string(topic_filter)
        return _fixed_header(0xA2, body)

    if isinstance(packet, Unsuback):
        _check_packet_id(packet.packet_id)
        body = _U16.pack(packet.packet_id)
        if v5:
            body += _props_block(b"") + bytes(packet.reason_codes)
        elif packet.reason_codes:
            raise EncodeError("unsuback reason codes require protocol level 5")
        return _fixed_header(0xB0, body)

    if isinstance(packet, Pingreq):
        return b"\xc0\x00"
    if isinstance(packet, Pingresp):
        return b"\xd0\x00"

    if isinstance(packet, Disconnect):
        if v5 and packet.reason_code:
            body = bytes([packet.reason_code])
        else:
            if packet.reason_code and not v5:
                raise EncodeError("disconnect reason code requires protocol level 5")
            body = b""
        return _fixed_header(0xE0, body)

    raise EncodeError(f"cannot encode {type(packet).__name__}")


def _check_packet_id(packet_id: int) -> None:
    if not 0 < packet_id <= 0xFFFF:
        raise EncodeError(f"packet id out of range: {packet_id}")


class _Reader:
    """Bounds-checked cursor over one packet body."""

    __slots__ = ("data", "pos", "end")

    def __init__(self, data: bytes, pos: int, end: int):
        self.data = data
        self.pos = pos
        self.end = end

    def remaining(self) -> int:
        return self.end - self.pos

    def u8(self) -> int:
        if self.pos + 1 > self.end:
            raise MalformedPacketError("truncated field")
        value = self.data[self.pos]
        self.pos += 1
        return value

    def u16(self) -> int:
        if self.pos + 2 > self.end:
            raise MalformedPacketError("truncated field")
        value = (self.data[self.pos] << 8) | self.data[self.pos + 1]
        self.pos += 2
        return value

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MalformedPacketError("truncated field")
        value = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return value

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacketError(f"invalid UTF-8 string: {exc}") from None

    def varint(self) -> int:
        try:
            value, used = decode_varint(self.data, self.pos)
        except NeedMoreData:
            raise MalformedPacketError("truncated varint in body") from None
        if self.pos + used > self.end:
            raise MalformedPacketError("varint crosses body boundary")
        self.pos += used
        return value

    def props(self) -> bytes:
        length = self.varint()
        return self.take(length)

    def rest(self) -> bytes:
        value = bytes(self.data[self.pos : self.end])
        self.pos = self.end
        return value


def decode_packet(
    data: bytes,
    protocol_level: int = 5,
    max_remaining_length: int = MAX_REMAINING_LENGTH,
) -> tuple[Packet, int]:
    """Decode one packet from the head of *data*.

    Returns (packet, bytes consumed). Raises NeedMoreData when *data* is a
    strict prefix of a valid packet, MalformedPacketError for anything that
    can never become valid.
    """
    packet, end = decode_packet_at(data, 0, protocol_level, max_remaining_length)
    return packet, end


def decode_packet_at(
    data: bytes,
    start: int,
    protocol_level: int = 5,
    max_remaining_length: int = MAX_REMAINING_LENGTH,
) -> tuple[Packet, int]:
    """Decode one packet beginning at *start*; returns (packet, end offset)."""
    if protocol_level not in (4, 5):
        raise MalformedPacketError(f"unsupported protocol level: {protocol_level}")
    if start >= len(data):
        raise NeedMoreData("empty input")
    first = data[start]
    packet_type = first >> 4
    flags = first & 0x0F
    remaining, varint_len = decode_varint(data, start + 1)
    if remaining > max_remaining_length:
        raise PacketTooLargeError(
            f"remaining length {remaining} exceeds limit {max_remaining_length}"
        )
    body_start = start + 1 + varint_len
    total = body_start + remaining
    if len(data) < total:
        raise NeedMoreData(f"have {len(data) - start} bytes, packet needs {total - start}")
    reader = _Reader(data, body_start, total)
    v5 = protocol_level == 5

    if packet_type == PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos == 3:
            raise MalformedPacketError("publish qos bits 11 are invalid")
        if qos == 2:
            raise MalformedPacketError("qos 2 is not supported")
        dup = bool(flags & 0x08)
        retain = bool(flags & 0x01)
        if qos == 0 and dup:
            raise MalformedPacketError("qos 0 publish must not set dup")
        topic = reader.string()
        if not topic or "+" in topic or "#" in topic or "\x00" in topic:
            raise MalformedPacketError(f"invalid publish topic: {topic!r}")
        packet_id = None
        if qos:
            packet_id = reader.u16()
            if packet_id == 0:
                raise MalformedPacketError("packet id 0 is invalid")
        properties = reader.props() if v5 else b""
        payload = reader.rest()
        return (
            Publish(topic, payload, qos, retain, dup, packet_id, properties),
            total,
        )

    if flags != _EXPECTED_FLAGS.get(packet_type, 0x00):
        raise MalformedPacketError(
            f"invalid flags 0x{flags:x} for packet type {packet_type}"
        )

    if packet_type == PacketType.PUBACK:
        packet_id = reader.u16()
        if packet_id == 0:
            raise MalformedPacketError("packet id 0 is invalid")
        reason = 0
        if reader.remaining():
            reason = reader.u8()
            if reader.remaining():
                reader.props()
        _finish(reader)
        return Puback(packet_id, reason), total

    if packet_type == PacketType.CONNECT:
        name = reader.take(reader.u16())
        if name != b"MQTT":
            raise MalformedPacketError(f"unknown protocol name {name!r}")
        level = reader.u8()
        if level not in (4, 5):
            raise MalformedPacketError(f"unsupported protocol level {level}")
        connect_flags = reader.u8()
        if connect_flags & 0x01:
            raise MalformedPacketError("connect reserved flag set")
        keep_alive = reader.u16()
        if level == 5:
            reader.props()
        client_id = reader.string()
        # Will, username and password are parsed then ignored.
        if connect_flags & 0x04:
            if level == 5:
                reader.props()
            reader.string()
            reader.take(reader.u16())
        if connect_flags & 0x80:
            reader.string()
        if connect_flags & 0x40:
            reader.take(reader.u16())
        _finish(reader)
        clean = bool(connect_flags & 0x02)
        return Connect(client_id, level, keep_alive, clean), total

    if packet_type == PacketType.CONNACK:
        ack_flags = reader.u8()
        if ack_flags & 0xFE:
            raise MalformedPacketError("invalid connack acknowledge flags")
        reason = reader.u8()
        if v5:
            reader.props()
        _finish(reader)
        return Connack(bool(ack_flags & 0x01), reason), total

    if packet_type == PacketType.SUBSCRIBE:
        packet_id = reader.u16()
        if packet_id == 0:
            raise MalformedPacketError("packet id 0 is invalid")
        if v5:
            reader.props()
        entries = []
        while reader.remaining():
            topic_filter = reader.string()
            options = reader.u8()
            qos = options & 0x03
            if qos == 3:
                raise MalformedPacketError("subscribe qos bits 11 are invalid")
            if options & (0xC0 if v5 else 0xFC):
                raise MalformedPacketError("reserved subscribe option bits set")
            entries.append((topic_filter, qos))
        if not entries:
            raise MalformedPacketError("subscribe with no entries")
        return Subscribe(packet_id, tuple(entries)), total

    if packet_type == PacketType.SUBACK:
        packet_id = reader.u16()
        if packet_id == 0:
            raise MalformedPacketError("packet id 0 is invalid")
        if v5:
            reader.props()
        codes = reader.rest()
        if not codes:
            raise MalformedPacketError("suback with no reason codes")
        return Suback(packet_id, tuple(codes)), total

    if packet_type == PacketType.UNSUBSCRIBE:
        packet_id = reader.u16()
        if packet_id == 0:
            raise MalformedPacketError("packet id 0 is invalid")
        if v5:
            reader.props()
        filters = []
        while reader.remaining():
            filters.append(reader.string())
        if not filters:
            raise MalformedPacketError("unsubscribe with no filters")
        return Unsubscribe(packet_id, tuple(filters)), total

    if packet_type == PacketType.UNSUBACK:
        packet_id = reader.u16()
        if packet_id == 0:
            raise MalformedPacketError("packet id 0 is invalid")
        codes: tuple[int, ...] = ()
        if v5:
            reader.props()
            codes = tuple(reader.rest())
        _finish(reader)
        return Unsuback(packet_id, codes), total

    if packet_type == PacketType.PINGREQ:
        _finish(reader)
        return Pingreq(), total

    if packet_type == PacketType.PINGRESP:
        _finish(reader)
        return Pingresp(), total

    if packet_type == PacketType.DISCONNECT:
        reason = 0
        if v5 and reader.remaining():
            reason = reader.u8()
            if reader.remaining():
                reader.props()
        _finish(reader)
        return Disconnect(reason), total

    raise MalformedPacketError(f"unknown packet type {packet_type}")


_EXPECTED_FLAGS = {
    PacketType.CONNECT: 0x00,
    PacketType.CONNACK: 0x00,
    PacketType.PUBACK: 0x00,
    PacketType.SUBSCRIBE: 0x02,
    PacketType.SUBACK: 0x00,
    PacketType.UNSUBSCRIBE: 0x02,
    PacketType.UNSUBACK: 0x00,
    PacketType.PINGREQ: 0x00,
    PacketType.PINGRESP: 0x00,
    PacketType.DISCONNECT: 0x00,
}


def _finish(reader: _Reader) -> None:
    if reader.remaining():
        raise MalformedPacketError(f"{reader.remaining()} trailing bytes in body")


def scan_publish(
    data,
    start: int,
    v5: bool,
    max_remaining_length: int = MAX_REMAINING_LENGTH,
) -> tuple[int, bytes, int, bool, bool, int, int, int]:
    """Parse the framing of one PUBLISH without building a Packet.

    Hot path for broker and verifier reader loops. Returns
    (end_offset, topic_bytes, qos, retain, dup, packet_id, packet_id_offset,
    payload_offset); packet_id is 0 and its offset -1 for QoS 0. Raises the
    same errors as decode_packet.
    """
    first = data[start]
    qos = (first >> 1) & 0x03
    if qos >= 2:
        raise MalformedPacketError("qos 2 is not supported" if qos == 2 else "publish qos bits 11 are invalid")
    remaining, varint_len = decode_varint(data, start + 1)
    if remaining > max_remaining_length:
        raise PacketTooLargeError(
            f"remaining length {remaining} exceeds limit {max_remaining_length}"
        )
    body = start + 1 + varint_len
    end = body + remaining
    if len(data) < end:
        raise NeedMoreData("incomplete publish")
    if body + 2 > end:
        raise MalformedPacketError("truncated topic length")
    topic_len = (data[body] << 8) | data[body + 1]
    topic_start = body + 2
    pos = topic_start + topic_len
    if pos > end:
        raise MalformedPacketError("truncated topic")
    topic_b = bytes(data[topic_start:pos])
    if not topic_b or b"+" in topic_b or b"#" in topic_b or b"\x00" in topic_b:
        raise MalformedPacketError(f"invalid publish topic: {topic_b!r}")
    pid = 0
    pid_off = -1
    if qos:
        if pos + 2 > end:
            raise MalformedPacketError("truncated packet id")
        pid = (data[pos] << 8) | data[pos + 1]
        if pid == 0:
            raise MalformedPacketError("packet id 0 is invalid")
        pid_off = pos
        pos += 2
    elif first & 0x08:
        raise MalformedPacketError("qos 0 publish must not set dup")
    if v5:
        try:
            props_len, used = decode_varint(data, pos)
        except NeedMoreData:
            raise MalformedPacketError("truncated property length") from None
        pos += used
        if pos > end:
            raise MalformedPacketError("property length crosses packet boundary")
        pos += props_len
        if pos > end:
            raise MalformedPacketError("properties cross packet boundary")
    return end, topic_b, qos, bool(first & 0x01), bool(first & 0x08), pid, pid_off, pos


def decode_stream(
    data: bytes,
    protocol_level: int = 5,
    max_remaining_length: int = MAX_REMAINING_LENGTH,
) -> tuple[list[Packet], int]:
    """Decode as many complete packets as *data* holds.

    Returns (packets, total bytes consumed); the unconsumed tail is a
    packet prefix to be retried once more bytes arrive.
    """
    packets: list[Packet] = []
    pos = 0
    while pos < len(data):
        try:
            packet, pos = decode_packet_at(
                data, pos, protocol_level, max_remaining_length
            )
        except NeedMoreData:
            break
        packets.append(packet)
    return packets, pos
