"""Minimal blocking MQTT client used by the load generator and verifier.

Handles the CONNECT/CONNACK and SUBSCRIBE/SUBACK handshakes synchronously;
the performance-sensitive send/receive loops live with their owners, which
work on the raw socket plus whatever this class already buffered.
"""

from __future__ import annotations

import socket
import time

from . import codec
from .codec import Connack, Connect, Disconnect, Puback, Publish, Suback, Subscribe

RECV_SIZE = 262_144
SOCKET_BUF = 1 << 20


class BrokerUnreachable(ConnectionError):
    """Broker unreachable or handshake refused."""


class ConnectionLost(ConnectionError):
    """Peer closed the connection mid-conversation."""


class MqttConnection:
    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        protocol_level: int = 5,
        keep_alive: int = 0,
        timeout: float = 10.0,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.protocol_level = protocol_level
        self.keep_alive = keep_alive
        self.buffer = bytearray()  # bytes read past the last handshake packet
        self._next_pid = 0
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BrokerUnreachable(f"cannot reach broker at {host}:{port}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, SOCKET_BUF)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, SOCKET_BUF)
        self.sock.settimeout(timeout)
        self.send_packet(Connect(client_id, protocol_level, keep_alive, clean_start=True))
        ack = self.read_packet()
        if not isinstance(ack, Connack):
            raise BrokerUnreachable(f"expected CONNACK, got {type(ack).__name__}")
        if ack.reason_code != 0:
            raise BrokerUnreachable(f"connection refused, reason 0x{ack.reason_code:02x}")
        self.sock.settimeout(None)

    # -- framing ----------------------------------------------------------

    def send(self, data) -> None:
        self.sock.sendall(data)

    def send_packet(self, packet) -> None:
        self.send(codec.encode_packet(packet, self.protocol_level))

    def read_packet(self):
        """Block until one full packet is buffered, then decode it."""
        while True:
            try:
                packet, end = codec.decode_packet_at(self.buffer, 0, self.protocol_level)
            except codec.NeedMoreData:
                chunk = self.sock.recv(RECV_SIZE)
                if not chunk:
                    raise ConnectionLost("connection closed by peer")
                self.buffer += chunk
                continue
            del self.buffer[:end]
            return packet

    def next_pid(self) -> int:
        self._next_pid = self._next_pid % 65_535 + 1
        return self._next_pid

    # -- conveniences -----------------------------------------------------

    def subscribe(self, filters, qos: int = 1) -> tuple[int, ...]:
        """Subscribe and wait for the SUBACK; returns granted codes.

        Packets arriving before the SUBACK (possible on resubscribe) are
        left in self.buffer for the owner's read loop.
        """
        pid = self.next_pid()
        entries = tuple((f, qos) for f in filters)
        self.send_packet(Subscribe(pid, entries))
        backlog = bytearray()
        while True:
            packet = self.read_packet()
            if isinstance(packet, Suback) and packet.packet_id == pid:
                self.buffer[:0] = backlog
                return packet.reason_codes
            backlog += codec.encode_packet(packet, self.protocol_level)

    def publish(
        self,
        topic: str,
        payload: bytes,
        qos: int = 0,
        retain: bool = False,
        ack_timeout: float = 10.0,
    ) -> None:
        """Send one publish; waits for the PUBACK at QoS 1. Test convenience."""
        pid = self.next_pid() if qos else None
        self.send_packet(Publish(topic, payload, qos, retain, False, pid))
        if not qos:
            return
        deadline = time.monotonic() + ack_timeout
        self.sock.settimeout(ack_timeout)
        try:
            while True:
                packet = self.read_packet()
                if isinstance(packet, Puback) and packet.packet_id == pid:
                    return
                if time.monotonic() > deadline:
                    raise TimeoutError(f"no PUBACK for packet {pid}")
        finally:
            self.sock.settimeout(None)

    def drain_publishes(self, duration: float) -> list[Publish]:
        """Collect publishes for *duration* seconds. Test convenience."""
        received = []
        deadline = time.monotonic() + duration
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                return received
            self.sock.settimeout(left)
            try:
                packet = self.read_packet()
            except (socket.timeout, ConnectionLost):
                return received
            finally:
                self.sock.settimeout(None)
            if isinstance(packet, Publish):
                received.append(packet)
                if packet.qos:
                    self.send_packet(Puback(packet.packet_id))

    def disconnect(self) -> None:
        try:
            self.send_packet(Disconnect())
        except OSError:
            pass
        self.close()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
