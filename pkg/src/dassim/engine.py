"""Deterministic discrete-event kernel with latency, bandwidth and byte accounting.

One :class:`Simulation` instance owns a virtual microsecond clock and a heap
of events ordered by (fire_time, sequence); the sequence tiebreaker makes
processing order fully deterministic.  Messages between registered node
actors pick up uplink/downlink serialization delay (when a finite bandwidth
budget is set) plus model latency, and every byte lands in the traffic
ledger, split by message class.

The engine is strictly single-threaded; run independent instances in
separate processes if parallelism is wanted.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .core import DeterministicRng, US_PER_SECOND


class MessageClass(Enum):
    CELL_TRANSFER = "cell"
    SIGNALING = "signaling"
    HEADER = "header"


class EventKind(Enum):
    MESSAGE_DELIVERY = "delivery"
    TIMER_EXPIRY = "timer"
    SLOT_BOUNDARY = "slot"


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    size_bytes: int
    msg_class: MessageClass
    body: object = None


@dataclass
class SimEvent:
    fire_time: int          # virtual microseconds
    sequence: int           # insertion-order tiebreaker
    kind: EventKind
    payload: object = None


class LatencyKind(Enum):
    CONSTANT = "constant"
    UNIFORM_RANGE = "uniform"
    REGION_MATRIX = "region_matrix"


@dataclass(frozen=True)
class LatencyModel:
    """One-way propagation delay between two nodes, in microseconds."""

    kind: LatencyKind = LatencyKind.UNIFORM_RANGE
    constant_us: int = 100_000
    min_us: int = 40_000
    max_us: int = 160_000
    region_matrix_us: tuple = ()   # square tuple-of-tuples, symmetric

    def __post_init__(self):
        if self.kind is LatencyKind.CONSTANT and self.constant_us <= 0:
            raise ValueError("constant latency must be positive")
        if self.kind is LatencyKind.UNIFORM_RANGE and not (0 < self.min_us <= self.max_us):
            raise ValueError("need 0 < min_us <= max_us")
        if self.kind is LatencyKind.REGION_MATRIX:
            m = self.region_matrix_us
            n = len(m)
            if n == 0 or any(len(row) != n for row in m):
                raise ValueError("region matrix must be square")
            for i in range(n):
                for j in range(n):
                    if m[i][j] != m[j][i]:
                        raise ValueError("region matrix must be symmetric")
                    if m[i][j] <= 0:
                        raise ValueError("latencies must be positive")

    def sample(self, rng: DeterministicRng, src_region: int = 0, dst_region: int = 0) -> int:
        if self.kind is LatencyKind.CONSTANT:
            return self.constant_us
        if self.kind is LatencyKind.UNIFORM_RANGE:
            return rng.randint(self.min_us, self.max_us)
        return self.region_matrix_us[src_region][dst_region]


@dataclass(frozen=True)
class BandwidthBudget:
    """Serialization rates in bytes/second; ``None`` means unlimited."""

    uplink_bytes_per_sec: int | None = None
    downlink_bytes_per_sec: int | None = None

    @staticmethod
    def serialization_us(size_bytes: int, rate: int | None) -> int:
        if rate is None:
            return 0
        return math.ceil(size_bytes * US_PER_SECOND / rate)


class TrafficLedger:
    """Byte and message counters, per node and per message class."""

    def __init__(self):
        self.bytes_sent = defaultdict(int)        # node -> bytes
        self.bytes_received = defaultdict(int)
        self.messages_sent = defaultdict(int)
        self.by_class_sent = defaultdict(int)     # (node, class) -> bytes
        self.total_by_class = defaultdict(int)    # class -> bytes
        self.total_sent = 0
        self.total_received = 0
        self.total_dropped = 0
        self.total_messages = 0

    def record_send(self, msg: Message) -> None:
        self.bytes_sent[msg.src] += msg.size_bytes
        self.messages_sent[msg.src] += 1
        self.by_class_sent[(msg.src, msg.msg_class)] += msg.size_bytes
        self.total_by_class[msg.msg_class] += msg.size_bytes
        self.total_sent += msg.size_bytes
        self.total_messages += 1

    def record_receive(self, msg: Message) -> None:
        self.bytes_received[msg.dst] += msg.size_bytes
        self.total_received += msg.size_bytes

    def record_drop(self, msg: Message) -> None:
        self.total_dropped += msg.size_bytes

    def record_bulk(self, src: int, dst: int, size_bytes: int,
                    msg_class: MessageClass, messages: int = 1) -> None:
        """Account traffic analytically without scheduling delivery events.

        Used for control-plane churn (e.g. topic subscription announcements)
        whose byte volume matters but whose per-message timing does not.
        """
        self.bytes_sent[src] += size_bytes
        self.messages_sent[src] += messages
        self.by_class_sent[(src, msg_class)] += size_bytes
        self.total_by_class[msg_class] += size_bytes
        self.total_sent += size_bytes
        self.bytes_received[dst] += size_bytes
        self.total_received += size_bytes
        self.total_messages += messages

    def class_total(self, msg_class: MessageClass) -> int:
        return self.total_by_class[msg_class]

    def sent_by_class(self, node: int, msg_class: MessageClass) -> int:
        return self.by_class_sent[(node, msg_class)]

    def snapshot(self) -> dict:
        return {
            "total_sent": self.total_sent,
            "total_received": self.total_received,
            "total_dropped": self.total_dropped,
            "by_class": {k.value: v for k, v in sorted(self.total_by_class.items(),
                                                       key=lambda kv: kv[0].value)},
        }


class TimerHandle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class ScheduleInPast(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class Simulation:
    """Single-threaded deterministic event loop."""

    def __init__(self, latency: LatencyModel | None = None,
                 rng: DeterministicRng | None = None, trace: bool = False):
        self.latency = latency or LatencyModel(kind=LatencyKind.CONSTANT)
        self._latency_rng = (rng or DeterministicRng(0)).substream("latency")
        self.now = 0
        self._seq = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self.actors: dict[int, object] = {}
        self.budgets: dict[int, BandwidthBudget] = {}
        self.regions: dict[int, int] = {}
        self.ledger = TrafficLedger()
        self.link_filter: Callable[[Message], bool] | None = None
        self._uplink_free: dict[int, int] = defaultdict(int)
        self._downlink_free: dict[int, int] = defaultdict(int)
        self._trace = hashlib.sha256() if trace else None
        self.events_processed = 0
        self._finalized = False

    # -- topology ------------------------------------------------------------

    def add_node(self, node_id: int, actor: object,
                 budget: BandwidthBudget | None = None, region: int = 0) -> None:
        self.actors[node_id] = actor
        if budget is not None:
            self.budgets[node_id] = budget
        self.regions[node_id] = region

    def remove_node(self, node_id: int) -> None:
        self.actors.pop(node_id, None)

    # -- scheduling ------------------------------------------------------------

    def schedule(self, event: SimEvent) -> None:
        if self._finalized:
            raise RuntimeError("engine finalized")
        if event.fire_time < self.now:
            raise ScheduleInPast(f"cannot schedule at {event.fire_time} < now {self.now}")
        heapq.heappush(self._queue, (event.fire_time, event.sequence, event))

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def schedule_callback(self, delay_us: int, fn: Callable, *args) -> TimerHandle:
        handle = TimerHandle()
        ev = SimEvent(self.now + delay_us, self._next_seq(), EventKind.TIMER_EXPIRY,
                      payload=(handle, fn, args))
        self.schedule(ev)
        return handle

    def schedule_slot_boundary(self, at_us: int, slot: int,
                               fn: Callable | None = None) -> None:
        ev = SimEvent(at_us, self._next_seq(), EventKind.SLOT_BOUNDARY,
                      payload=(slot, fn))
        self.schedule(ev)

    # -- messaging ------------------------------------------------------------

    def send_message(self, src: int, dst: int, size_bytes: int,
                     msg_class: MessageClass, body: object = None,
                     extra_latency_us: int = 0) -> int:
        """Schedule delivery of one message; returns the delivery time.

        Delivery time = uplink serialization (queued behind earlier sends from
        ``src``) + propagation latency + downlink serialization at ``dst``.
        """
        if src not in self.actors:
            raise UnknownNode(f"unknown sender {src:#x}")
        if dst not in self.actors:
            raise UnknownNode(f"unknown recipient {dst:#x}")
        if src == dst:
            raise ValueError("cannot send a message to self")
        msg = Message(src=src, dst=dst, size_bytes=size_bytes,
                      msg_class=msg_class, body=body)
        self.ledger.record_send(msg)

        up = self.budgets.get(src)
        ser_start = self.now
        if up is not None and up.uplink_bytes_per_sec is not None:
            ser_start = max(self.now, self._uplink_free[src])
            ser_end = ser_start + BandwidthBudget.serialization_us(
                size_bytes, up.uplink_bytes_per_sec)
            self._uplink_free[src] = ser_end
        else:
            ser_end = self.now

        latency = self.latency.sample(self._latency_rng,
                                      self.regions.get(src, 0),
                                      self.regions.get(dst, 0))
        arrival = ser_end + latency + extra_latency_us

        down = self.budgets.get(dst)
        if down is not None and down.downlink_bytes_per_sec is not None:
            start = max(arrival, self._downlink_free[dst])
            arrival = start + BandwidthBudget.serialization_us(
                size_bytes, down.downlink_bytes_per_sec)
            self._downlink_free[dst] = arrival

        ev = SimEvent(arrival, self._next_seq(), EventKind.MESSAGE_DELIVERY, payload=msg)
        self.schedule(ev)
        return arrival

    # -- execution ------------------------------------------------------------

    def _process(self, event: SimEvent) -> None:
        self.now = event.fire_time
        self.events_processed += 1
        if self._trace is not None:
            self._trace.update(f"{event.fire_time}:{event.sequence}:{event.kind.value}".encode())
        if event.kind is EventKind.MESSAGE_DELIVERY:
            msg: Message = event.payload
            if self._trace is not None:
                self._trace.update(
                    f":{msg.src}:{msg.dst}:{msg.size_bytes}:{msg.msg_class.value}".encode())
            if self.link_filter is not None and not self.link_filter(msg):
                self.ledger.record_drop(msg)
                return
            actor = self.actors.get(msg.dst)
            if actor is None:
                self.ledger.record_drop(msg)
                return
            self.ledger.record_receive(msg)
            actor.on_message(self, msg)
        elif event.kind is EventKind.TIMER_EXPIRY:
            handle, fn, args = event.payload
            if not handle.cancelled:
                fn(self, *args)
        elif event.kind is EventKind.SLOT_BOUNDARY:
            slot, fn = event.payload
            if fn is not None:
                fn(self, slot)

    def run_until(self, time_us: int | None = None) -> TrafficLedger:
        """Process events up to ``time_us`` (inclusive), or to quiescence."""
        while self._queue:
            fire, _, _ = self._queue[0]
            if time_us is not None and fire > time_us:
                break
            _, _, event = heapq.heappop(self._queue)
            self._process(event)
        if time_us is not None and time_us > self.now:
            self.now = time_us
        return self.ledger

    def run_to_quiescence(self) -> TrafficLedger:
        return self.run_until(None)

    @property
    def pending_events(self) -> int:
        return len(self._queue)

    def trace_hash(self) -> str:
        if self._trace is None:
            raise RuntimeError("simulation was created without trace=True")
        return self._trace.hexdigest()


# -- request/response layer ----------------------------------------------------


@dataclass(frozen=True)
class RpcRequest:
    kind: str
    request_id: int
    payload: object


@dataclass(frozen=True)
class RpcResponse:
    request_id: int
    payload: object


class RpcActor:
    """Base class for protocol actors speaking request/response over messages.

    Subclasses register handlers in ``self.rpc_handlers``; a handler returns
    ``(payload, size_bytes, msg_class)`` for the response, or ``None`` to stay
    silent (the requester then times out).
    """

    _next_request_id = 0

    def __init__(self, node_id: int):
        self.node_id = node_id
        self.rpc_handlers: dict[str, Callable] = {}
        self._pending: dict[int, tuple[Callable, TimerHandle]] = {}

    def rpc_call(self, sim: Simulation, dst: int, kind: str, payload: object,
                 size_bytes: int, msg_class: MessageClass,
                 on_reply: Callable, timeout_us: int,
                 extra_latency_us: int = 0) -> int:
        """Send a request; ``on_reply(sim, payload_or_None)`` fires exactly once."""
        RpcActor._next_request_id += 1
        rid = RpcActor._next_request_id
        timer = sim.schedule_callback(timeout_us, self._on_timeout, rid)
        self._pending[rid] = (on_reply, timer)
        sim.send_message(self.node_id, dst, size_bytes, msg_class,
                         RpcRequest(kind=kind, request_id=rid, payload=payload),
                         extra_latency_us=extra_latency_us)
        return rid

    def _on_timeout(self, sim: Simulation, rid: int) -> None:
        entry = self._pending.pop(rid, None)
        if entry is not None:
            entry[0](sim, None)

    def on_message(self, sim: Simulation, msg: Message) -> None:
        body = msg.body
        if isinstance(body, RpcRequest):
            handler = self.rpc_handlers.get(body.kind)
            if handler is None:
                return
            result = handler(sim, msg.src, body.payload)
            if result is not None:
                payload, size_bytes, msg_class = result
                sim.send_message(self.node_id, msg.src, size_bytes, msg_class,
                                 RpcResponse(request_id=body.request_id, payload=payload))
        elif isinstance(body, RpcResponse):
            entry = self._pending.pop(body.request_id, None)
            if entry is not None:
                on_reply, timer = entry
                timer.cancel()
                on_reply(sim, body.payload)
        else:
            self.on_plain_message(sim, msg)

    def on_plain_message(self, sim: Simulation, msg: Message) -> None:
        """Hook for one-way (non-RPC) messages; default drops silently."""


#: nominal wire sizes for control-plane traffic
SIGNALING_BASE_BYTES = 100
NODE_RECORD_WIRE_BYTES = 38   # 32 B id + IPv4 + port
COORD_WIRE_BYTES = 8
KEY_WIRE_BYTES = 32
