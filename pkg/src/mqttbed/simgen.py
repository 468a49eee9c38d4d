"""Device catalog and the publisher fleet that replays it under batch/sleep pacing.

The canonical catalog is ten fixed IoT messages (door contacts, temperature
and humidity sensors, CO2 air quality, raw semicolon-delimited readings, and
an AGV order/state pair). Load shape: the run's messages form one global
round-robin sequence over the catalog, cut into batches; workers take
contiguous slices of each batch, send them back-to-back, and all workers
sleep between batches.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field

from . import codec
from .client import MqttConnection
from .topic import parse_topic

PUBLISHER_WINDOW = 2_000     # max unacked QoS1 publishes per worker
SEND_FLUSH = 131_072


@dataclass(frozen=True)
class DeviceTemplate:
    label: str
    topic: str
    payload: bytes
    retain: bool = False


CANONICAL_TEMPLATES: tuple[DeviceTemplate, ...] = (
    DeviceTemplate(
        "door_01_n",
        "s1t/moskevka/arrow/door/door_01_n/r1s0124b002342cddc/state",
        b'{"battery":"99.5", "battery_low": "false", "contact": "false", '
        b'"linkquality": "22.62", "temp": "false", "voltage": "952.32"}',
    ),
    DeviceTemplate(
        "door_main_n",
        "s1t/moskevka/corridor/door/door_main_n/r1sFCCCCFFFF/state",
        b'{"battery":"51.12", "battery_low": "true", "contact": "true", '
        b'"linkquality": "32.06", "temp": "false", "voltage": "3011.03"}',
    ),
    DeviceTemplate(
        "temp_hun_01_n",
        "s1t/moskevka/reception/sensor_temp_json/temp_hun_01_n/r1s0124b00239de24c/state",
        b'{"battery":"97.11", "humidity": "31.51", "linkquality": "37.35", '
        b'"temperature": "10", "voltage": "2479.62"}',
    ),
    DeviceTemplate(
        "temp_hvn_02_n",
        "s1t/moskevka/scoop/sensor_temp_json/temp_hvn_02_n/r1s0124b0023a5278f/state",
        b'{"battery":"13.45", "humidity": "52.42", "linkquality": "22.12", '
        b'"temperature": "40.3", "voltage": "2721.81"}',
    ),
    DeviceTemplate(
        "air_quality_sensor_02_n",
        "s1t/moskevka/bcss/sensor_co2/air_quality_sensor_02_n/r1s8TT4ee80cc8703f/state",
        b'{"co2":"5096.81", "heat_index": "9.44", "humidity": "51.41", '
        b'"pressure": "1001.71", "temperature": "-2.13", "tvoc": "6771.39"}',
    ),
    DeviceTemplate(
        "air_quality_sensor_01_n",
        "s1t/moskevka/crunch/sensor_co2/air_quality_sensor_01_n/r1sF0000DFFFF/state",
        b'{"co2":"6072.28", "heat_index": "30.28", "humidity": "55.8", '
        b'"pressure": "764.57", "temperature": "30.28", "tvoc": "5578.84"}',
    ),
    DeviceTemplate(
        "temp_2_n",
        "s1t/vrsovicka/outside/sensor/temp_2_n/r1s40e78e0f389/state/FFFFFFFFFB/state",
        b"FFFFFFFF;2021-08-03 17:05:59;-11.11;56.67;-7.86;28.9;;",
    ),
    DeviceTemplate(
        "temp_1_n",
        "s1t/vrsovicka/drill/sensor/temp_1_n/r1s7e2055haf309/state",
        b"dev7e2055haf309;;2021-08-03 17:04:39;30.17;56.06;27.88;39;;",
    ),
    DeviceTemplate(
        "agv_order",
        "s1t/vrsovicka/mainFloor1/av/deveLop3/650891DEDC52/order",
        b"MOVE_TO_TARGET#29:3",
    ),
    DeviceTemplate(
        "agv_state",
        "s1t/vrsovicka/mainFloor2/av/deveLop3/650891DEDC52/state",
        b"650891DEDC52;0L_MAY;Moving;[20, 13]2021-08-03 at 17:04:28",
    ),
)


class CatalogError(ValueError):
    """Malformed catalog file or invalid entry."""


@dataclass(frozen=True)
class Catalog:
    templates: tuple[DeviceTemplate, ...]

    def __len__(self) -> int:
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    def payload_size_range(self) -> tuple[int, int]:
        sizes = [len(t.payload) for t in self.templates]
        return min(sizes), max(sizes)

    def validate(self) -> "Catalog":
        if not self.templates:
            raise CatalogError("catalog has no entries")
        for t in self.templates:
            parse_topic(t.topic)
        return self


def load_catalog(path: str | None = None) -> Catalog:
    """Load a catalog file (JSON list of {label, topic, payload, retain});
    with no path, return the embedded canonical catalog."""
    if path is None:
        return Catalog(CANONICAL_TEMPLATES)
    try:
        with open(path, encoding="utf-8") as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot load catalog {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise CatalogError("catalog file must contain a JSON list")
    templates = []
    for i, entry in enumerate(entries):
        try:
            templates.append(
                DeviceTemplate(
                    label=entry["label"],
                    topic=entry["topic"],
                    payload=entry["payload"].encode("utf-8"),
                    retain=bool(entry.get("retain", False)),
                )
            )
        except (TypeError, KeyError) as exc:
            raise CatalogError(f"catalog entry {i} malformed: {exc}") from exc
    try:
        return Catalog(tuple(templates)).validate()
    except Exception as exc:
        raise CatalogError(f"catalog invalid: {exc}") from exc


@dataclass(frozen=True)
class PacingPlan:
    """Load shape: *total_messages* split into *num_batches* bursts, all
    workers sleeping *inter_batch_sleep_ms* between consecutive bursts."""

    total_messages: int
    num_batches: int
    inter_batch_sleep_ms: float
    workers: int

    @property
    def batch_size(self) -> int:
        return math.ceil(self.total_messages / self.num_batches)

    @property
    def floor_duration_ms(self) -> float:
        return (self.num_batches - 1) * self.inter_batch_sleep_ms

    def batch_sizes(self) -> list[int]:
        """Per-batch message counts; the last batch takes the remainder."""
        size = self.batch_size
        sizes = []
        left = self.total_messages
        for _ in range(self.num_batches):
            take = min(size, left)
            sizes.append(take)
            left -= take
        return sizes


def build_plan(
    total: int, batches: int, sleep_ms: float, workers: int
) -> PacingPlan:
    if total < 1:
        raise ValueError(f"total_messages must be >= 1, got {total}")
    if batches < 1:
        raise ValueError(f"num_batches must be >= 1, got {batches}")
    if batches > total:
        raise ValueError("num_batches cannot exceed total_messages")
    if sleep_ms < 0:
        raise ValueError(f"inter_batch_sleep_ms must be >= 0, got {sleep_ms}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return PacingPlan(total, batches, sleep_ms, workers)


@dataclass
class PublishLog:
    """Ground truth of what the fleet actually sent."""

    sent_total: int = 0
    per_worker: list[int] = field(default_factory=list)
    per_topic: dict[str, int] = field(default_factory=dict)
    first_send_ts: float = 0.0
    last_ack_ts: float = 0.0
    batch_send_ms: list[float] = field(default_factory=list)
    payload_size_min: int = 0
    payload_size_max: int = 0
    qos: int = 1
    mode: str = "canonical"

    @property
    def duration_ms(self) -> float:
        return max(0.0, (self.last_ack_ts - self.first_send_ts) * 1000.0)


class PublisherError(RuntimeError):
    """A worker aborted; carries whatever was sent up to that point."""

    def __init__(self, message: str, partial_log: PublishLog):
        super().__init__(message)
        self.partial_log = partial_log


def _slice_of(start: int, end: int, workers: int, w: int) -> tuple[int, int]:
    """Contiguous near-even split of [start, end) among workers."""
    n = end - start
    base, extra = divmod(n, workers)
    lo = start + w * base + min(w, extra)
    return lo, lo + base + (1 if w < extra else 0)


class _Worker:
    def __init__(
        self,
        index: int,
        plan: PacingPlan,
        catalog: Catalog,
        host: str,
        port: int,
        qos: int,
        mode: str,
        protocol_level: int,
        barrier: threading.Barrier,
        puback_timeout_s: float,
        max_retransmits: int,
        client_prefix: str,
    ):
        self.index = index
        self.plan = plan
        self.catalog = catalog
        self.qos = qos
        self.mode = mode
        self.protocol_level = protocol_level
        self.barrier = barrier
        self.puback_timeout_s = puback_timeout_s
        self.max_retransmits = max_retransmits
        self.conn = MqttConnection(
            host, port, f"{client_prefix}-{index:02d}", protocol_level
        )
        self.sent = 0
        self.acked = 0
        self.per_template = [0] * len(catalog)
        self.first_send_ts = 0.0
        self.last_ack_ts = 0.0
        self.batch_send_ms: list[float] = []
        self.payload_min = 1 << 60
        self.payload_max = 0
        self.seq = 0
        self.error: BaseException | None = None
        self._ack_cond = threading.Condition()
        self._inflight: dict[int, list] = {}  # pid -> [frame, deadline, resends]
        self._next_pid = 0
        self._reader: threading.Thread | None = None
        self._stop = False

    # -- frames -----------------------------------------------------------

    def _prepare_templates(self):
        v5 = self.protocol_level == 5
        prepared = []
        for t in self.catalog:
            if self.qos == 0:
                frame = codec.encode_packet(
                    codec.Publish(t.topic, t.payload, 0, t.retain), self.protocol_level
                )
                prepared.append((bytes(frame), -1, t))
            else:
                frame = bytearray(
                    codec.encode_packet(
                        codec.Publish(t.topic, t.payload, 1, t.retain, False, 1),
                        self.protocol_level,
                    )
                )
                _, vl = codec.decode_varint(frame, 1)
                topic_len = (frame[1 + vl] << 8) | frame[2 + vl]
                prepared.append((frame, 1 + vl + 2 + topic_len, t))
        # Sequenced frames are rebuilt per message; keep the parts.
        self._seq_parts = []
        for t in self.catalog:
            topic_block = len(t.topic.encode()).to_bytes(2, "big") + t.topic.encode()
            self._seq_parts.append((topic_block, t.payload, b"\x00" if v5 else b""))
        return prepared

    def _build_sequenced(self, template_idx: int, pid: int) -> bytes:
        topic_block, payload, props = self._seq_parts[template_idx]
        tagged = b"seq=%d:%d;%s" % (self.index, self.seq, payload)
        self.seq += 1
        if self.qos:
            body_len = len(topic_block) + 2 + len(props) + len(tagged)
            return (
                b"\x32"
                + codec.encode_varint(body_len)
                + topic_block
                + pid.to_bytes(2, "big")
                + props
                + tagged
            )
        body_len = len(topic_block) + len(props) + len(tagged)
        return b"\x30" + codec.encode_varint(body_len) + topic_block + props + tagged

    # -- ack handling -----------------------------------------------------

    def _reader_loop(self):
        sock = self.conn.sock
        buf = bytearray(self.conn.buffer)
        self.conn.buffer = bytearray()
        try:
            while not self._stop:
                chunk = sock.recv(65_536)
                if not chunk:
                    return
                buf += chunk
                now = time.perf_counter()
                pos = 0
                blen = len(buf)
                pids = []
                while pos < blen:
                    if buf[pos] >> 4 == 4 and pos + 2 <= blen and buf[pos + 1] == 2:
                        if pos + 4 > blen:
                            break
                        pids.append((buf[pos + 2] << 8) | buf[pos + 3])
                        pos += 4
                        continue
                    try:
                        packet, pos = codec.decode_packet_at(
                            buf, pos, self.protocol_level
                        )
                    except codec.NeedMoreData:
                        break
                    if isinstance(packet, codec.Puback):
                        pids.append(packet.packet_id)
                del buf[:pos]
                if pids:
                    with self._ack_cond:
                        for pid in pids:
                            if self._inflight.pop(pid, None) is not None:
                                self.acked += 1
                        self.last_ack_ts = now
                        self._ack_cond.notify_all()
        except OSError:
            return

    def _await_window(self, limit: int) -> None:
        deadline_slack = 0.1
        with self._ack_cond:
            while self.sent - self.acked >= limit:
                self._retransmit_due_locked()
                self._ack_cond.wait(deadline_slack)

    def _retransmit_due_locked(self) -> None:
        now = time.perf_counter()
        resend = None
        for pid, record in self._inflight.items():
            if record[1] <= now:
                if record[2] >= self.max_retransmits:
                    raise PubackTimeout(
                        f"worker {self.index}: no PUBACK for packet {pid} after "
                        f"{record[2]} retransmissions"
                    )
                frame = bytearray(record[0])
                frame[0] |= 0x08  # dup
                record[0] = bytes(frame)
                record[1] = now + self.puback_timeout_s
                record[2] += 1
                if resend is None:
                    resend = bytearray()
                resend += record[0]
        if resend:
            self.conn.send(resend)

    # -- main loop ----------------------------------------------------------

    def run(self) -> None:
        try:
            self._run()
        except threading.BrokenBarrierError:
            self.error = self.error or RuntimeError(
                f"worker {self.index}: aborted (another worker failed)"
            )
        except BaseException as exc:
            self.error = exc
            self.barrier.abort()
        finally:
            self._stop = True
            self.conn.close()
            if self._reader is not None:
                self._reader.join(timeout=5)

    def _run(self) -> None:
        plan = self.plan
        templates = self._prepare_templates()
        n_templates = len(templates)
        if self.qos:
            self._reader = threading.Thread(
                target=self._reader_loop,
                name=f"publisher-acks-{self.index}",
                daemon=True,
            )
            self._reader.start()
        sock = self.conn.sock
        out = bytearray()
        batch_start_idx = 0
        sizes = plan.batch_sizes()
        sleep_s = plan.inter_batch_sleep_ms / 1000.0
        for b, batch_size in enumerate(sizes):
            self.barrier.wait()
            if b == 0:
                self.first_send_ts = time.perf_counter()
            lo, hi = _slice_of(
                batch_start_idx, batch_start_idx + batch_size, plan.workers, self.index
            )
            batch_t0 = time.perf_counter()
            for g in range(lo, hi):
                idx = g % n_templates
                frame, pid_off, template = templates[idx]
                if self.qos:
                    if self.sent - self.acked >= PUBLISHER_WINDOW:
                        if out:
                            sock.sendall(out)
                            out = bytearray()
                        self._await_window(PUBLISHER_WINDOW)
                    self._next_pid = pid = self._next_pid % 65_535 + 1
                    if self.mode == "canonical":
                        frame[pid_off] = pid >> 8
                        frame[pid_off + 1] = pid & 0xFF
                        wire = bytes(frame)
                    else:
                        wire = self._build_sequenced(idx, pid)
                    with self._ack_cond:
                        self._inflight[pid] = [
                            wire,
                            time.perf_counter() + self.puback_timeout_s,
                            0,
                        ]
                else:
                    wire = frame if self.mode == "canonical" else self._build_sequenced(idx, 0)
                out += wire
                self.sent += 1
                self.per_template[idx] += 1
                payload_len = (
                    len(template.payload)
                    if self.mode == "canonical"
                    else len(wire) - pid_off - 2 - 1 if False else None
                )
                if len(out) >= SEND_FLUSH:
                    sock.sendall(out)
                    out = bytearray()
            if out:
                sock.sendall(out)
                out = bytearray()
            self.batch_send_ms.append((time.perf_counter() - batch_t0) * 1000.0)
            batch_start_idx += batch_size
            if b < len(sizes) - 1:
                time.sleep(sleep_s)
        if self.qos:
            with self._ack_cond:
                while self.acked < self.sent:
                    self._retransmit_due_locked()
                    self._ack_cond.wait(0.1)
        else:
            self.last_ack_ts = time.perf_counter()
        self.conn.send_packet(codec.Disconnect())


class PubackTimeout(RuntimeError):
    pass


def run_publishers(
    plan: PacingPlan,
    catalog: Catalog,
    host: str,
    port: int,
    qos: int = 1,
    mode: str = "canonical",
    protocol_level: int = 5,
    puback_timeout_s: float = 30.0,
    max_retransmits: int = 2,
    client_prefix: str = "pub",
) -> PublishLog:
    """Run the whole fleet to completion and aggregate the PublishLog.

    Raises PublisherError (with the partial log) if any worker aborts, and
    propagates connection errors if the broker is unreachable.
    """
    if qos not in (0, 1):
        raise ValueError(f"qos must be 0 or 1, got {qos}")
    if mode not in ("canonical", "sequenced"):
        raise ValueError(f"unknown mode: {mode}")
    catalog.validate()
    barrier = threading.Barrier(plan.workers)
    workers = [
        _Worker(
            i,
            plan,
            catalog,
            host,
            port,
            qos,
            mode,
            protocol_level,
            barrier,
            puback_timeout_s,
            max_retransmits,
            client_prefix,
        )
        for i in range(plan.workers)
    ]
    threads = [
        threading.Thread(target=w.run, name=f"publisher-{w.index}", daemon=True)
        for w in workers
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    log = PublishLog(qos=qos, mode=mode)
    log.per_worker = [w.sent for w in workers]
    log.sent_total = sum(log.per_worker)
    per_topic: dict[str, int] = {}
    for w in workers:
        for idx, count in enumerate(w.per_template):
            if count:
                topic = catalog.templates[idx].topic
                per_topic[topic] = per_topic.get(topic, 0) + count
    log.per_topic = per_topic
    log.first_send_ts = min((w.first_send_ts for w in workers if w.first_send_ts), default=0.0)
    log.last_ack_ts = max((w.last_ack_ts for w in workers), default=0.0)
    n_batches = max((len(w.batch_send_ms) for w in workers), default=0)
    log.batch_send_ms = [
        max(
            (w.batch_send_ms[b] for w in workers if len(w.batch_send_ms) > b),
            default=0.0,
        )
        for b in range(n_batches)
    ]
    cat_min, cat_max = catalog.payload_size_range()
    if mode == "canonical":
        log.payload_size_min, log.payload_size_max = cat_min, cat_max
    else:
        # seq prefix length varies; derive bounds from what was actually sent
        mins = [w.payload_min for w in workers if w.payload_min != 1 << 60]
        maxs = [w.payload_max for w in workers if w.payload_max]
        log.payload_size_min = min(mins) if mins else 0
        log.payload_size_max = max(maxs) if maxs else 0

    errors = [w.error for w in workers if w.error is not None]
    if errors:
        primary = next(
            (e for e in errors if not isinstance(e, RuntimeError) or "aborted (another" not in str(e)),
            errors[0],
        )
        raise PublisherError(f"publisher fleet aborted: {primary}", log) from primary
    return log
