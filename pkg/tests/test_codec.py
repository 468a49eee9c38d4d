"""Wire codec tests: hand-derived byte vectors, round trips, framing edges."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqttbed import codec
from mqttbed.codec import (
    Connack,
    Connect,
    Disconnect,
    EncodeError,
    MalformedPacketError,
    NeedMoreData,
    PacketTooLargeError,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
    decode_packet,
    decode_stream,
    decode_varint,
    encode_packet,
    encode_varint,
)

# Hand-executed 7-bit continuation encoding at every byte-length boundary.
VARINT_VECTORS = [
    (0, bytes([0x00])),
    (127, bytes([0x7F])),
    (128, bytes([0x80, 0x01])),
    (16_383, bytes([0xFF, 0x7F])),
    (16_384, bytes([0x80, 0x80, 0x01])),
    (2_097_151, bytes([0xFF, 0xFF, 0x7F])),
    (2_097_152, bytes([0x80, 0x80, 0x80, 0x01])),
    (268_435_455, bytes([0xFF, 0xFF, 0xFF, 0x7F])),
]


class TestVarint:
    @pytest.mark.parametrize("value,encoded", VARINT_VECTORS)
    def test_boundary_vectors(self, value, encoded):
        assert encode_varint(value) == encoded
        assert decode_varint(encoded) == (value, len(encoded))

    def test_out_of_range(self):
        with pytest.raises(EncodeError):
            encode_varint(-1)
        with pytest.raises(EncodeError):
            encode_varint(268_435_456)

    def test_overlong_sequence_is_malformed(self):
        with pytest.raises(MalformedPacketError):
            decode_varint(bytes([0x80, 0x80, 0x80, 0x80, 0x01]))
        with pytest.raises(MalformedPacketError):
            decode_varint(bytes([0x80, 0x80, 0x80, 0x80]))

    def test_truncated_is_need_more(self):
        with pytest.raises(NeedMoreData):
            decode_varint(b"")
        with pytest.raises(NeedMoreData):
            decode_varint(bytes([0x80]))
        with pytest.raises(NeedMoreData):
            decode_varint(bytes([0xFF, 0xFF]))

    @given(st.integers(min_value=0, max_value=codec.MAX_VARINT))
    def test_round_trip(self, value):
        encoded = encode_varint(value)
        assert 1 <= len(encoded) <= 4
        assert decode_varint(encoded) == (value, len(encoded))

    @given(st.integers(min_value=0, max_value=codec.MAX_VARINT))
    def test_minimality(self, value):
        # The minimal length is determined by the highest set payload bit.
        encoded = encode_varint(value)
        expected_len = 1 + max(0, (value.bit_length() - 1)) // 7
        assert len(encoded) == expected_len


class TestFixedVectors:
    def test_pingreq(self):
        assert encode_packet(Pingreq(), 4) == b"\xc0\x00"
        assert encode_packet(Pingreq(), 5) == b"\xc0\x00"

    def test_pingresp_round_trip(self):
        raw = encode_packet(Pingresp())
        assert decode_packet(raw) == (Pingresp(), 2)

    def test_small_publish_level4(self):
        # Hand-encoded: type 3 + flags 0, remaining 4, topic len 1, 'a', 'x'.
        raw = encode_packet(Publish("a", b"x"), 4)
        assert raw == bytes([0x30, 0x04, 0x00, 0x01]) + b"ax"
        assert decode_packet(raw, 4) == (Publish("a", b"x"), 6)

    def test_small_publish_level5(self):
        # Level 5 inserts an empty property block (one 0x00 byte) before the
        # payload, so the packet is 7 bytes with remaining length 5.
        raw = encode_packet(Publish("a", b"x"), 5)
        assert raw == bytes([0x30, 0x05, 0x00, 0x01]) + b"a" + b"\x00" + b"x"
        assert len(raw) == 7
        assert decode_packet(raw, 5) == (Publish("a", b"x"), 7)

    def test_publish_qos1_flags_and_packet_id(self):
        raw = encode_packet(Publish("a/b", b"p", qos=1, packet_id=7), 4)
        assert raw[0] == 0x32
        packet, _ = decode_packet(raw, 4)
        assert packet.packet_id == 7 and packet.qos == 1

    def test_puback_level5_short_form(self):
        raw = encode_packet(Puback(513), 5)
        assert raw == bytes([0x40, 0x02, 0x02, 0x01])
        assert decode_packet(raw, 5) == (Puback(513), 4)


class TestEncodeInvariants:
    def test_qos1_requires_packet_id(self):
        with pytest.raises(EncodeError, match="packet id"):
            encode_packet(Publish("a", b"", qos=1))

    def test_qos0_rejects_packet_id(self):
        with pytest.raises(EncodeError):
            encode_packet(Publish("a", b"", qos=0, packet_id=1))

    def test_qos2_rejected(self):
        with pytest.raises(EncodeError, match="qos"):
            encode_packet(Publish("a", b"", qos=2, packet_id=1))

    def test_wildcard_topic_rejected(self):
        with pytest.raises(EncodeError, match="wildcard"):
            encode_packet(Publish("a/+/b", b""))
        with pytest.raises(EncodeError):
            encode_packet(Publish("", b""))

    def test_properties_require_level5(self):
        with pytest.raises(EncodeError, match="level 5"):
            encode_packet(Publish("a", b"", properties=b"\x01\x00"), 4)

    def test_packet_id_range(self):
        with pytest.raises(EncodeError):
            encode_packet(Puback(0))
        with pytest.raises(EncodeError):
            encode_packet(Puback(65_536))


class TestDecodeErrors:
    def test_first_byte_of_publish_needs_more(self):
        raw = encode_packet(Publish("a", b"x"), 4)
        with pytest.raises(NeedMoreData):
            decode_packet(raw[:1], 4)

    def test_unknown_packet_type(self):
        with pytest.raises(MalformedPacketError):
            decode_packet(bytes([0x00, 0x00]))
        with pytest.raises(MalformedPacketError):
            decode_packet(bytes([0xF0, 0x00]))  # AUTH unsupported

    def test_bad_flags_for_type(self):
        with pytest.raises(MalformedPacketError):
            decode_packet(bytes([0xC1, 0x00]))  # PINGREQ with nonzero flags

    def test_publish_qos2_rejected(self):
        with pytest.raises(MalformedPacketError):
            decode_packet(bytes([0x34, 0x06, 0x00, 0x01, 0x61, 0x00, 0x01, 0x78]), 4)

    def test_publish_qos3_rejected(self):
        with pytest.raises(MalformedPacketError):
            decode_packet(bytes([0x36, 0x04, 0x00, 0x01, 0x61, 0x78]), 4)

    def test_invalid_utf8_topic(self):
        body = bytes([0x00, 0x02, 0xC3, 0x28]) + b"x"
        raw = bytes([0x30, len(body)]) + body
        with pytest.raises(MalformedPacketError):
            decode_packet(raw, 4)

    def test_wildcard_in_publish_topic(self):
        body = bytes([0x00, 0x01]) + b"#" + b"x"
        raw = bytes([0x30, len(body)]) + body
        with pytest.raises(MalformedPacketError):
            decode_packet(raw, 4)

    def test_remaining_length_cap(self):
        raw = bytes([0x30]) + encode_varint(2_000_000)
        with pytest.raises(PacketTooLargeError):
            decode_packet(raw, 4, max_remaining_length=1_000_000)

    def test_trailing_garbage_in_body(self):
        raw = bytes([0xC0, 0x01, 0x00])  # PINGREQ must have empty body
        with pytest.raises(MalformedPacketError):
            decode_packet(raw)

    def test_zero_packet_id(self):
        with pytest.raises(MalformedPacketError):
            decode_packet(bytes([0x40, 0x02, 0x00, 0x00]), 4)


def _topic_names():
    segment = st.text(
        alphabet=st.characters(
            blacklist_characters="#+/\x00", blacklist_categories=("Cs",)
        ),
        max_size=8,
    )
    return st.lists(segment, min_size=1, max_size=5).map("/".join).filter(
        lambda t: 0 < len(t.encode()) <= 200
    )


def _filters():
    literal = st.text(
        alphabet=st.characters(
            blacklist_characters="#+/\x00", blacklist_categories=("Cs",)
        ),
        max_size=6,
    )
    level = st.one_of(literal, st.just("+"))
    return st.builds(
        lambda levels, tail: "/".join(levels + ([tail] if tail else [])),
        st.lists(level, min_size=1, max_size=4),
        st.sampled_from(["", "#"]),
    ).filter(lambda f: 0 < len(f.encode()) <= 200)


def _packets(protocol_level: int):
    payloads = st.binary(max_size=64)
    packet_ids = st.integers(min_value=1, max_value=0xFFFF)
    qos1_publish = st.builds(
        lambda t, p, r, d, i, props: Publish(t, p, 1, r, d, i, props),
        _topic_names(),
        payloads,
        st.booleans(),
        st.booleans(),
        packet_ids,
        st.binary(max_size=16) if protocol_level == 5 else st.just(b""),
    )
    qos0_publish = st.builds(
        lambda t, p, r, props: Publish(t, p, 0, r, False, None, props),
        _topic_names(),
        payloads,
        st.booleans(),
        st.binary(max_size=16) if protocol_level == 5 else st.just(b""),
    )
    entries = st.lists(
        st.tuples(_filters(), st.integers(min_value=0, max_value=1)),
        min_size=1,
        max_size=4,
    ).map(tuple)
    return st.one_of(
        qos0_publish,
        qos1_publish,
        st.builds(
            Connect,
            st.text(max_size=16).filter(lambda s: len(s.encode()) <= 100),
            st.just(protocol_level),
            st.integers(min_value=0, max_value=0xFFFF),
            st.booleans(),
        ),
        st.builds(Connack, st.booleans(), st.sampled_from([0, 1, 2, 128, 135])),
        st.builds(Puback, packet_ids, st.sampled_from([0, 16] if protocol_level == 5 else [0])),
        st.builds(Subscribe, packet_ids, entries),
        st.builds(
            Suback,
            packet_ids,
            st.lists(st.sampled_from([0, 1, 128]), min_size=1, max_size=4).map(tuple),
        ),
        st.builds(
            Unsubscribe,
            packet_ids,
            st.lists(_filters(), min_size=1, max_size=4).map(tuple),
        ),
        st.builds(
            Unsuback,
            packet_ids,
            st.lists(st.sampled_from([0, 17]), min_size=1, max_size=4).map(tuple)
            if protocol_level == 5
            else st.just(()),
        ),
        st.just(Pingreq()),
        st.just(Pingresp()),
        st.builds(Disconnect, st.sampled_from([0, 4, 128] if protocol_level == 5 else [0])),
    )


class TestRoundTripProperties:
    @settings(max_examples=300, deadline=None)
    @given(st.integers(min_value=4, max_value=5).flatmap(
        lambda lvl: st.tuples(st.just(lvl), _packets(lvl))
    ))
    def test_round_trip(self, level_and_packet):
        level, packet = level_and_packet
        raw = encode_packet(packet, level)
        decoded, consumed = decode_packet(raw, level)
        assert decoded == packet
        assert consumed == len(raw)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(min_value=4, max_value=5).flatmap(
        lambda lvl: st.tuples(st.just(lvl), _packets(lvl))
    ), st.data())
    def test_prefix_safety(self, level_and_packet, data):
        level, packet = level_and_packet
        raw = encode_packet(packet, level)
        cut = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
        with pytest.raises(NeedMoreData):
            decode_packet(raw[:cut], level)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=4, max_value=5).flatmap(
        lambda lvl: st.tuples(st.just(lvl), st.lists(_packets(lvl), min_size=0, max_size=6))
    ))
    def test_concatenation(self, level_and_packets):
        level, packets = level_and_packets
        stream = b"".join(encode_packet(p, level) for p in packets)
        decoded, consumed = decode_stream(stream, level)
        assert decoded == list(packets)
        assert consumed == len(stream)

    def test_concatenation_with_partial_tail(self):
        p1 = encode_packet(Publish("a/b", b"one", qos=1, packet_id=1))
        p2 = encode_packet(Pingreq())
        p3 = encode_packet(Publish("c", b"two"))
        stream = p1 + p2 + p3[:3]
        decoded, consumed = decode_stream(stream)
        assert decoded == [Publish("a/b", b"one", qos=1, packet_id=1), Pingreq()]
        assert consumed == len(p1) + len(p2)


class TestConnectDetails:
    def test_connect_carries_its_own_level(self):
        for level in (4, 5):
            raw = encode_packet(Connect("dev-1", level, 30, True))
            packet, _ = decode_packet(raw, 5)
            assert packet == Connect("dev-1", level, 30, True)

    def test_connect_with_will_is_parsed_and_ignored(self):
        # Hand-built level 4 CONNECT with will flag, topic "w", payload "p".
        body = (
            bytes([0x00, 0x04]) + b"MQTT" + bytes([0x04, 0x06, 0x00, 0x0A])
            + bytes([0x00, 0x02]) + b"cl"
            + bytes([0x00, 0x01]) + b"w"
            + bytes([0x00, 0x01]) + b"p"
        )
        raw = bytes([0x10, len(body)]) + body
        packet, _ = decode_packet(raw, 4)
        assert packet == Connect("cl", 4, 10, True)

    def test_unknown_protocol_name(self):
        body = bytes([0x00, 0x06]) + b"MQIsdp" + bytes([0x03, 0x02, 0x00, 0x00, 0x00, 0x00])
        raw = bytes([0x10, len(body)]) + body
        with pytest.raises(MalformedPacketError):
            decode_packet(raw, 4)
