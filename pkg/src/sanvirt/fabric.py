"""Deterministic discrete-event model of a switched SAN fabric.

Time is an integer count of microseconds.  Every node hangs off one central
switch through a full-duplex link; each direction of a link is a FIFO that
serializes transfers (store-and-forward).  Simultaneous events fire in the
order they were scheduled.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

from .errors import LivelockGuard, NoRoute

HEADER_BYTES = 64
MiB = 1 << 20
DEFAULT_LATENCY_US = 100
DEFAULT_BANDWIDTH = 100 * MiB
DEFAULT_MAX_EVENTS = 20_000_000
SWITCH = "switch"


def transfer_us(nbytes, bandwidth_bytes_per_s):
    """Serialization time of ``nbytes``, rounded up to a whole microsecond."""
    return -(-nbytes * 1_000_000 // bandwidth_bytes_per_s)


class Event(NamedTuple):
    fire_at: int
    seq: int
    fn: Callable
    args: tuple


@dataclass
class Message:
    src: str
    dst: str
    kind: str
    size: int
    body: Any = None

    def __post_init__(self):
        if self.size < HEADER_BYTES:
            raise ValueError(f"message of {self.size} bytes is smaller than a frame header")


@dataclass
class Channel:
    """One direction of a link."""
    busy_until: int = 0
    busy_us: int = 0
    bytes: int = 0
    messages: int = 0
    intervals: list = field(default_factory=list)

    def busy_within(self, horizon):
        total = 0
        for start, end in self.intervals:
            if start >= horizon:
                break
            total += min(end, horizon) - start
        return total


class FabricLink:
    def __init__(self, endpoint_a, endpoint_b, latency_us=DEFAULT_LATENCY_US,
                 bandwidth_bytes_per_s=DEFAULT_BANDWIDTH):
        if bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth must be positive")
        if latency_us < 0:
            raise ValueError("latency must be non-negative")
        self.endpoint_a = endpoint_a
        self.endpoint_b = endpoint_b
        self.latency_us = int(latency_us)
        self.bandwidth_bytes_per_s = int(bandwidth_bytes_per_s)
        self.channels = {(endpoint_a, endpoint_b): Channel(),
                         (endpoint_b, endpoint_a): Channel()}

    def channel(self, src, dst):
        try:
            return self.channels[(src, dst)]
        except KeyError:
            raise NoRoute(f"link {self.endpoint_a}<->{self.endpoint_b} "
                          f"does not connect {src}->{dst}") from None

    def busy_until(self, src, dst):
        return self.channel(src, dst).busy_until

    def transmit(self, src, dst, nbytes, at_time):
        """Queue ``nbytes`` from ``src`` to ``dst``; return the delivery time."""
        ch = self.channel(src, dst)
        start = max(at_time, ch.busy_until)
        ser = transfer_us(nbytes, self.bandwidth_bytes_per_s)
        ch.busy_until = start + ser
        ch.busy_us += ser
        ch.bytes += nbytes
        ch.messages += 1
        ch.intervals.append((start, start + ser))
        return start + ser + self.latency_us

    def send(self, msg, at_time):
        return self.transmit(msg.src, msg.dst, msg.size, at_time)

    @property
    def bytes(self):
        return sum(ch.bytes for ch in self.channels.values())

    def busy_fraction(self, horizon):
        """Busiest direction's share of ``[0, horizon)`` spent transmitting."""
        if horizon <= 0:
            return 0.0
        return max(ch.busy_within(horizon) for ch in self.channels.values()) / horizon


class Trace:
    """Streams ``(t, src, dst, kind, bytes)`` records into a SHA-256 digest."""

    def __init__(self, path=None, keep=False):
        self._sha = hashlib.sha256()
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self.records = [] if keep else None
        self.count = 0

    def record(self, t_us, src, dst, kind, nbytes):
        line = json.dumps({"t_us": t_us, "src": src, "dst": dst, "kind": kind,
                           "bytes": nbytes}, separators=(",", ":")) + "\n"
        self._sha.update(line.encode())
        self.count += 1
        if self._fh:
            self._fh.write(line)
        if self.records is not None:
            self.records.append((t_us, src, dst, kind, nbytes))

    def hexdigest(self):
        return self._sha.hexdigest()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


class Simulator:
    def __init__(self, max_events=DEFAULT_MAX_EVENTS, trace=None):
        self.now = 0
        self.max_events = max_events
        self.events_processed = 0
        self.trace = trace if trace is not None else Trace()
        self._queue: list[Event] = []
        self._seq = 0

    def schedule_at(self, t, fn, *args):
        if t < self.now:
            raise ValueError(f"cannot schedule at {t}, clock is already {self.now}")
        heapq.heappush(self._queue, Event(int(t), self._seq, fn, args))
        self._seq += 1

    def schedule(self, delay, fn, *args):
        self.schedule_at(self.now + delay, fn, *args)

    @property
    def pending(self):
        return len(self._queue)

    def step(self):
        ev = heapq.heappop(self._queue)
        self.now = ev.fire_at
        self.events_processed += 1
        if self.events_processed > self.max_events:
            raise LivelockGuard(f"more than {self.max_events} events processed")
        ev.fn(*ev.args)

    def run_until(self, t):
        while self._queue and self._queue[0].fire_at <= t:
            self.step()
        return self.now

    def run_until_idle(self):
        while self._queue:
            self.step()
        return self.now


def run_until_idle(sim):
    return sim.run_until_idle()


class Fabric:
    """Star topology: node -> switch -> node, two store-and-forward hops."""

    def __init__(self, sim, latency_us=DEFAULT_LATENCY_US,
                 bandwidth_bytes_per_s=DEFAULT_BANDWIDTH, overrides=None):
        self.sim = sim
        self.latency_us = latency_us
        self.bandwidth = bandwidth_bytes_per_s
        self.overrides = overrides or {}
        self.links: dict[str, FabricLink] = {}
        self.handlers: dict[str, Callable] = {}
        self.kind_counts: dict[str, int] = {}

    def attach(self, node_id, handler):
        if node_id in self.links or node_id == SWITCH:
            raise ValueError(f"node {node_id!r} already attached")
        o = self.overrides.get(node_id, {})
        self.links[node_id] = FabricLink(
            node_id, SWITCH, o.get("latency_us", self.latency_us),
            o.get("bandwidth_bytes_per_s", self.bandwidth))
        self.handlers[node_id] = handler
        return self.links[node_id]

    def send(self, msg):
        if msg.src not in self.links or msg.dst not in self.links:
            raise NoRoute(f"{msg.src}->{msg.dst}: endpoint not attached")
        if msg.src == msg.dst:
            raise NoRoute(f"{msg.src} cannot send to itself")
        t = self.links[msg.src].transmit(msg.src, SWITCH, msg.size, self.sim.now)
        self.sim.schedule_at(t, self._at_switch, msg)

    def _at_switch(self, msg):
        t = self.links[msg.dst].transmit(SWITCH, msg.dst, msg.size, self.sim.now)
        self.sim.schedule_at(t, self._deliver, msg)

    def _deliver(self, msg):
        self.sim.trace.record(self.sim.now, msg.src, msg.dst, msg.kind, msg.size)
        self.kind_counts[msg.kind] = self.kind_counts.get(msg.kind, 0) + 1
        self.handlers[msg.dst](msg)

    def total_bytes(self):
        """Bytes carried across all links, counting each hop once."""
        return sum(link.bytes for link in self.links.values())
