"""Single-node in-process MQTT broker.

One reader thread per connection, one writer thread per session. Outbound
messages flow through a bounded per-session queue; when a queue is full the
publishing reader blocks, which stops it reading from the publisher socket
and lets TCP back-pressure propagate. Nothing is ever dropped: PUBACK is
withheld until the message sits in every matching session's queue.

Deliberately in-memory and clean-session only. Queues are acyclic in the
intended workload (publishers do not subscribe); mutually-publishing slow
clients could block each other, which is inherent to bounded no-drop queues.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import codec
from .codec import (
    Connack,
    Connect,
    Disconnect,
    MQTTError,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
)
from .topic import SubscriptionTree, TopicError, matches, parse_filter, parse_topic

RECV_SIZE = 262_144
SEND_FLUSH = 131_072
SOCKET_BUF = 1 << 20
CONNECT_DEADLINE_S = 10.0


@dataclass
class BrokerConfig:
    host: str = "127.0.0.1"
    port: int = 1883
    max_inflight: int = 1_000          # per-session unacked QoS1 deliveries
    queue_capacity: int = 100_000      # per-session outbound queue, in messages
    keep_alive_grace: float = 1.5
    protocol_levels: tuple[int, ...] = (4, 5)
    retransmit_timeout_s: float = 5.0
    max_remaining_length: int = codec.MAX_REMAINING_LENGTH

    def validate(self) -> None:
        if not 0 <= self.port <= 65_535:
            raise ValueError(f"port out of range: {self.port}")
        if self.max_inflight < 1 or self.max_inflight > 60_000:
            raise ValueError("max_inflight must be in [1, 60000]")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.keep_alive_grace < 1.0:
            raise ValueError("keep_alive_grace must be >= 1.0")
        if not set(self.protocol_levels) <= {4, 5}:
            raise ValueError("protocol_levels must be a subset of {4, 5}")


@dataclass
class BrokerStats:
    connected: int
    routed: int                      # publishes accepted from clients
    enqueued: int                    # deliveries placed into session queues
    queue_depths: dict[str, int] = field(default_factory=dict)
    inflight_depths: dict[str, int] = field(default_factory=dict)


class _QueueClosed(Exception):
    pass


class _BoundedQueue:
    """Bounded FIFO with blocking put and batched get; closable from any thread."""

    def __init__(self, capacity: int):
        self._items: deque = deque()
        self._capacity = capacity
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item) -> None:
        with self._cond:
            while len(self._items) >= self._capacity:
                if self._closed:
                    raise _QueueClosed
                self._cond.wait()
            if self._closed:
                raise _QueueClosed
            self._items.append(item)
            self._cond.notify_all()

    def get_batch(self, max_n: int):
        """Block until items are available; None once closed."""
        with self._cond:
            while not self._items:
                if self._closed:
                    return None
                self._cond.wait()
            items = self._items
            n = min(max_n, len(items))
            batch = [items.popleft() for _ in range(n)]
            self._cond.notify_all()
            return batch

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._items.clear()
            self._cond.notify_all()

    def depth(self) -> int:
        return len(self._items)


class _Session:
    """One client connection: protocol state machine plus delivery machinery."""

    def __init__(self, broker: "Broker", sock: socket.socket, peer):
        self.broker = broker
        self.sock = sock
        self.peer = peer
        self.client_id = ""
        self.protocol_level = 5
        self.keep_alive = 0
        self.queue = _BoundedQueue(broker.config.queue_capacity)
        self.send_lock = threading.Lock()
        self.flight_cond = threading.Condition()
        self.inflight: dict[int, list] = {}  # pid -> [frame bytearray, deadline]
        self.next_pid = 0
        self.last_activity = time.monotonic()
        self.closed = False
        self._close_lock = threading.Lock()
        self.registered = False
        self.received_publishes = 0
        self.enqueued = 0
        self.reader_thread = threading.Thread(
            target=self._reader_loop, name=f"broker-reader-{peer}", daemon=True
        )
        self.writer_thread: threading.Thread | None = None

    def start(self) -> None:
        self.reader_thread.start()

    # -- outbound ---------------------------------------------------------

    def send(self, data) -> None:
        with self.send_lock:
            self.sock.sendall(data)

    def send_packet(self, packet) -> None:
        self.send(codec.encode_packet(packet, self.protocol_level))

    def _alloc_pid_locked(self) -> int:
        pid = self.next_pid
        while True:
            pid = pid % 65_535 + 1
            if pid not in self.inflight:
                self.next_pid = pid
                return pid

    def _writer_loop(self) -> None:
        max_inflight = self.broker.config.max_inflight
        rto = self.broker.config.retransmit_timeout_s
        out = bytearray()
        try:
            while True:
                batch = self.queue.get_batch(512)
                if batch is None:
                    break
                for raw, pid_off, out_qos in batch:
                    if out_qos:
                        if len(self.inflight) >= max_inflight:
                            # Flush before waiting: unsent frames cannot be acked.
                            if out:
                                self.send(out)
                                out = bytearray()
                            with self.flight_cond:
                                while (
                                    len(self.inflight) >= max_inflight
                                    and not self.closed
                                ):
                                    self.flight_cond.wait(0.5)
                            if self.closed:
                                return
                        frame = bytearray(raw)
                        with self.flight_cond:
                            pid = self._alloc_pid_locked()
                            frame[pid_off] = pid >> 8
                            frame[pid_off + 1] = pid & 0xFF
                            self.inflight[pid] = [frame, time.monotonic() + rto]
                        out += frame
                    else:
                        out += raw
                    if len(out) >= SEND_FLUSH:
                        self.send(out)
                        out = bytearray()
                if out:
                    self.send(out)
                    out = bytearray()
        except (OSError, _QueueClosed):
            pass
        finally:
            self.close()

    def ack_many(self, pids) -> None:
        with self.flight_cond:
            hit = False
            for pid in pids:
                if self.inflight.pop(pid, None) is not None:
                    hit = True
            if hit:
                self.flight_cond.notify_all()

    def retransmit_due(self, now: float) -> None:
        resend = None
        with self.flight_cond:
            for record in self.inflight.values():
                if record[1] <= now:
                    record[0][0] |= 0x08  # dup flag
                    record[1] = now + self.broker.config.retransmit_timeout_s
                    if resend is None:
                        resend = bytearray()
                    resend += record[0]
        if resend:
            self.send(resend)

    # -- inbound ----------------------------------------------------------

    def _reader_loop(self) -> None:
        try:
            self.sock.settimeout(CONNECT_DEADLINE_S)
            buf = bytearray()
            if not self._handshake(buf):
                return
            self.sock.settimeout(None)
            self._serve(buf)
        except (OSError, MQTTError, TopicError, ValueError):
            pass
        finally:
            self.close()

    def _handshake(self, buf: bytearray) -> bool:
        """Read CONNECT, register, reply CONNACK. False aborts the connection."""
        while True:
            try:
                packet, end = codec.decode_packet_at(
                    buf, 0, 5, self.broker.config.max_remaining_length
                )
            except codec.NeedMoreData:
                chunk = self.sock.recv(RECV_SIZE)
                if not chunk:
                    return False
                buf += chunk
                continue
            break
        if not isinstance(packet, Connect):
            return False
        if packet.protocol_level not in self.broker.config.protocol_levels:
            self.protocol_level = packet.protocol_level
            refusal = 0x84 if packet.protocol_level == 5 else 0x01
            try:
                self.send_packet(Connack(False, refusal))
            except OSError:
                pass
            return False
        self.protocol_level = packet.protocol_level
        self.keep_alive = packet.keep_alive
        self.client_id = packet.client_id or f"anon-{id(self):x}"
        del buf[:end]
        self.broker._register(self)
        self.registered = True
        # Clean session always: no state survives, session_present is False.
        self.send_packet(Connack(False, 0))
        self.writer_thread = threading.Thread(
            target=self._writer_loop,
            name=f"broker-writer-{self.client_id}",
            daemon=True,
        )
        self.writer_thread.start()
        return True

    def _serve(self, buf: bytearray) -> None:
        v5 = self.protocol_level == 5
        max_rl = self.broker.config.max_remaining_length
        broker = self.broker
        sock = self.sock
        while True:
            chunk = sock.recv(RECV_SIZE)
            if not chunk:
                return
            self.last_activity = time.monotonic()
            buf += chunk
            pos = 0
            blen = len(buf)
            acks = bytearray()
            ack_pids: list[int] = []
            while pos < blen:
                packet_type = buf[pos] >> 4
                if packet_type == 3:
                    try:
                        (
                            end,
                            topic_b,
                            qos,
                            retain,
                            _dup,
                            pid,
                            _pid_off,
                            pay_off,
                        ) = codec.scan_publish(buf, pos, v5, max_rl)
                    except codec.NeedMoreData:
                        break
                    self.received_publishes += 1
                    if retain:
                        broker._handle_publish_slow(self, buf, pos, end)
                    else:
                        broker._fan_out(self, topic_b, qos, buf, pos, end)
                    if qos:
                        if len(acks) >= 2_048:
                            self.send(acks)
                            acks = bytearray()
                        acks += b"\x40\x02"
                        acks.append(pid >> 8)
                        acks.append(pid & 0xFF)
                    pos = end
                elif packet_type == 4:
                    if pos + 2 > blen:
                        break
                    if buf[pos + 1] == 2:  # common short form
                        if pos + 4 > blen:
                            break
                        ack_pids.append((buf[pos + 2] << 8) | buf[pos + 3])
                        pos += 4
                    else:
                        try:
                            packet, end = codec.decode_packet_at(
                                buf, pos, self.protocol_level, max_rl
                            )
                        except codec.NeedMoreData:
                            break
                        ack_pids.append(packet.packet_id)
                        pos = end
                else:
                    try:
                        packet, end = codec.decode_packet_at(buf, pos, self.protocol_level, max_rl)
                    except codec.NeedMoreData:
                        break
                    pos = end
                    if not self._handle_control(packet):
                        if acks:
                            self.send(acks)
                        if ack_pids:
                            self.ack_many(ack_pids)
                        return
            if ack_pids:
                self.ack_many(ack_pids)
            if acks:
                self.send(acks)
            if pos:
                del buf[:pos]

    def _handle_control(self, packet) -> bool:
        """Non-publish packets; False ends the session."""
        if isinstance(packet, Pingreq):
            self.send_packet(Pingresp())
            return True
        if isinstance(packet, Subscribe):
            return self._handle_subscribe(packet)
        if isinstance(packet, Unsubscribe):
            codes = self.broker._unsubscribe(self, packet.filters)
            self.send_packet(Unsuback(packet.packet_id, codes if self.protocol_level == 5 else ()))
            return True
        if isinstance(packet, Disconnect):
            return False
        # CONNECT twice, or a server-to-client packet: protocol violation.
        return False

    def _handle_subscribe(self, packet: Subscribe) -> bool:
        granted: list[int] = []
        filters = []
        for filter_str, requested_qos in packet.entries:
            parsed = parse_filter(filter_str)  # TopicError closes the connection
            qos = min(requested_qos, 1)
            filters.append((parsed, qos))
            granted.append(qos)
        replay = self.broker._subscribe(self, filters)
        self.send_packet(Suback(packet.packet_id, tuple(granted)))
        for frame, pid_off, out_qos in replay:
            try:
                self.queue.put((frame, pid_off, out_qos))
            except _QueueClosed:
                return False
        return True

    # -- lifecycle --------------------------------------------------------

    def close(self) -> None:
        with self._close_lock:
            if self.closed:
                return
            self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self.queue.close()
        with self.flight_cond:
            self.flight_cond.notify_all()
        self.broker._deregister(self)


class Broker:
    """Embedded MQTT broker; the handle returned by start()."""

    def __init__(self, config: BrokerConfig | None = None):
        self.config = config or BrokerConfig()
        self.config.validate()
        self.port = self.config.port
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._housekeeper: threading.Thread | None = None
        self._stop_event = threading.Event()
        self._lock = threading.RLock()  # routing authority: tree, retained, registry
        self._tree = SubscriptionTree()
        self._retained: dict[str, Publish] = {}
        self._registry: dict[str, _Session] = {}
        self._sessions: set[_Session] = set()
        self._route_cache: dict[bytes, tuple[int, list]] = {}
        self._routed_closed = 0
        self._enqueued_closed = 0
        self._started = False

    # -- public API -------------------------------------------------------

    def start(self) -> "Broker":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.config.host, self.config.port))
        listener.listen(128)
        self._listener = listener
        self.port = listener.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="broker-accept", daemon=True
        )
        self._housekeeper = threading.Thread(
            target=self._housekeeping_loop, name="broker-housekeeping", daemon=True
        )
        self._started = True
        self._accept_thread.start()
        self._housekeeper.start()
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._stop_event.set()
        if self._listener is not None:
            try:
                # close() alone leaves a blocked accept() running and the
                # port acceptable; shutdown wakes it and releases the port.
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        for session in list(self._sessions):
            session.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        if self._housekeeper is not None:
            self._housekeeper.join(timeout=5)
        for session in list(self._sessions):
            session.reader_thread.join(timeout=5)
            if session.writer_thread is not None:
                session.writer_thread.join(timeout=5)
        self._sessions.clear()
        self._started = False

    def stats(self) -> BrokerStats:
        with self._lock:
            live = list(self._registry.values())
            routed = self._routed_closed + sum(s.received_publishes for s in live)
            enqueued = self._enqueued_closed + sum(s.enqueued for s in live)
            return BrokerStats(
                connected=len(self._registry),
                routed=routed,
                enqueued=enqueued,
                queue_depths={s.client_id: s.queue.depth() for s in live},
                inflight_depths={s.client_id: len(s.inflight) for s in live},
            )

    @property
    def endpoint(self) -> tuple[str, int]:
        return (self.config.host, self.port)

    # -- internals --------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop_event.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, SOCKET_BUF)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, SOCKET_BUF)
            session = _Session(self, sock, peer)
            self._sessions.add(session)
            session.start()

    def _housekeeping_loop(self) -> None:
        interval = min(0.25, self.config.retransmit_timeout_s / 4)
        while not self._stop_event.wait(interval):
            now = time.monotonic()
            for session in list(self._sessions):
                if session.closed:
                    self._sessions.discard(session)
                    continue
                try:
                    session.retransmit_due(now)
                except OSError:
                    session.close()
                    continue
                if session.keep_alive:
                    deadline = (
                        session.last_activity
                        + self.config.keep_alive_grace * session.keep_alive
                    )
                    if now > deadline:
                        session.close()

    def _register(self, session: _Session) -> None:
        with self._lock:
            old = self._registry.pop(session.client_id, None)
            self._registry[session.client_id] = session
            self._route_cache.clear()  # registry changed; cached targets are stale
        if old is not None:
            old.close()

    def _deregister(self, session: _Session) -> None:
        with self._lock:
            if session.registered:
                self._tree.unsubscribe_all(session.client_id)
                if self._registry.get(session.client_id) is session:
                    del self._registry[session.client_id]
                self._routed_closed += session.received_publishes
                self._enqueued_closed += session.enqueued
                session.registered = False
            self._route_cache.clear()
        self._sessions.discard(session)

    def _subscribe(self, session: _Session, filters) -> list:
        """Apply subscriptions; returns retained frames to replay."""
        replay = []
        with self._lock:
            for parsed, qos in filters:
                self._tree.subscribe(session.client_id, parsed, qos)
                for topic_str, retained in self._retained.items():
                    if matches(parsed, parse_topic(topic_str)):
                        out_qos = min(retained.qos, qos)
                        frame, pid_off = _encode_delivery(
                            retained, out_qos, session.protocol_level, retain=True
                        )
                        replay.append((frame, pid_off, out_qos))
        return replay

    def _unsubscribe(self, session: _Session, filter_strs) -> tuple[int, ...]:
        codes = []
        with self._lock:
            for filter_str in filter_strs:
                try:
                    parsed = parse_filter(filter_str)
                except TopicError:
                    codes.append(0x11)
                    continue
                removed = self._tree.unsubscribe(session.client_id, parsed)
                codes.append(0x00 if removed else 0x11)
        return tuple(codes)

    def _route(self, topic_b: bytes) -> list:
        """Deduplicated delivery targets for a topic, cached per tree version."""
        cached = self._route_cache.get(topic_b)
        if cached is not None and cached[0] == self._tree.version:
            return cached[1]
        with self._lock:
            topic = parse_topic(topic_b.decode("utf-8"))
            per_client: dict[str, int] = {}
            for client_id, qos in self._tree.route(topic):
                prev = per_client.get(client_id)
                if prev is None or qos > prev:
                    per_client[client_id] = qos
            targets = [
                (self._registry[client_id], qos)
                for client_id, qos in per_client.items()
                if client_id in self._registry
            ]
            self._route_cache[topic_b] = (self._tree.version, targets)
            return targets

    def _fan_out(
        self,
        source: _Session,
        topic_b: bytes,
        qos: int,
        buf: bytearray,
        start: int,
        end: int,
    ) -> None:
        """Deliver one non-retained publish; blocks when a target queue is full."""
        targets = self._route(topic_b)
        if not targets:
            return
        raw = None
        for target, granted in targets:
            out_qos = qos if qos < granted else granted
            if (
                target.protocol_level == source.protocol_level
                and out_qos == qos
            ):
                if raw is None:
                    # Shared read-only frame: dup and retain cleared here,
                    # per-target packet ids patched into copies by writers.
                    raw = bytearray(memoryview(buf)[start:end])
                    raw[0] = 0x30 | (qos << 1)
                    pid_off = _publish_pid_offset(raw) if qos else -1
                item = (raw, pid_off, out_qos)
            else:
                packet, _ = codec.decode_packet_at(
                    buf, start, source.protocol_level, self.config.max_remaining_length
                )
                frame, off = _encode_delivery(
                    packet, out_qos, target.protocol_level, retain=False
                )
                item = (frame, off, out_qos)
            try:
                target.queue.put(item)
                source.enqueued += 1
            except _QueueClosed:
                pass

    def _handle_publish_slow(
        self, source: _Session, buf: bytearray, start: int, end: int
    ) -> None:
        """Retained publish: update the store, then fan out with retain cleared."""
        packet, _ = codec.decode_packet_at(
            buf, start, source.protocol_level, self.config.max_remaining_length
        )
        with self._lock:
            if packet.payload:
                self._retained[packet.topic] = packet
            else:
                self._retained.pop(packet.topic, None)
        topic_b = packet.topic.encode("utf-8")
        targets = self._route(topic_b)
        for target, granted in targets:
            out_qos = packet.qos if packet.qos < granted else granted
            frame, off = _encode_delivery(packet, out_qos, target.protocol_level, retain=False)
            try:
                target.queue.put((frame, off, out_qos))
                source.enqueued += 1
            except _QueueClosed:
                pass


def _encode_delivery(
    packet: Publish, out_qos: int, level: int, retain: bool
) -> tuple[bytearray, int]:
    """Re-encode a publish for one subscriber; returns (frame, pid offset)."""
    rebuilt = Publish(
        topic=packet.topic,
        payload=packet.payload,
        qos=out_qos,
        retain=retain,
        dup=False,
        packet_id=1 if out_qos else None,  # placeholder, patched by the writer
        properties=packet.properties if level == 5 else b"",
    )
    frame = bytearray(codec.encode_packet(rebuilt, level))
    pid_off = _publish_pid_offset(frame) if out_qos else -1
    return frame, pid_off


def _publish_pid_offset(frame) -> int:
    """Offset of the packet id within an encoded QoS1 publish frame."""
    _, varint_len = codec.decode_varint(frame, 1)
    topic_len = (frame[1 + varint_len] << 8) | frame[2 + varint_len]
    return 1 + varint_len + 2 + topic_len
