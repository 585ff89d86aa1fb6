"""Event kernel: simulation clock, event queue, per-entity random streams.

Constraints the rest of the package relies on:

* Timestamps are non-negative integers (picoseconds).  Integer arithmetic
  never loses precision, so identical runs produce identical timestamps on
  any platform.
* Every event carries the sort key ``(time, source, seq)`` where ``seq`` is a
  counter maintained per source entity.  The key is globally unique and gives
  a total order that does not depend on worker assignment.
* Random draws go through per-entity streams derived from the global seed and
  the entity name only, so a partition change never re-orders anyone's draws.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from typing import Any, Callable, Iterable

# Time units, expressed in picoseconds.
PS = 1
NS = 1_000
US = 1_000_000
MS = 1_000_000_000
SEC = 1_000_000_000_000

#: Sentinel returned by ``EventQueue.min_time`` when a queue is empty.  Large
#: enough that no real timestamp can reach it (validated at config load).
INF_TIME = 2 ** 62

MAIN_LANE = 0
LAGGED_LANE = 1


class SchedulingInPast(ValueError):
    """An event was scheduled before the clock of its target lane."""


class UnknownEntity(KeyError):
    """An event referenced an entity name absent from the network."""


class CausalityViolation(RuntimeError):
    """A worker received an event whose timestamp is already in its past.

    This is fatal by design: it means the lookahead contract was broken and
    the run can no longer be trusted.
    """


class Event:
    """A scheduled handler invocation.

    Attributes:
        time: absolute timestamp in integer picoseconds.
        source: name of the entity that scheduled the event.
        seq: per-source sequence number (assigned by the scheduler).
        target: name of the entity whose handler runs.
        handler: method name looked up on the target entity.
        payload: JSON-serializable dict handed to the handler.
        dest_worker: worker that owns the target entity.
    """

    __slots__ = ("time", "source", "seq", "target", "handler", "payload", "dest_worker")

    def __init__(self, time: int, source: str, seq: int, target: str,
                 handler: str, payload: dict, dest_worker: int) -> None:
        self.time = time
        self.source = source
        self.seq = seq
        self.target = target
        self.handler = handler
        self.payload = payload
        self.dest_worker = dest_worker

    @property
    def sort_key(self) -> tuple[int, str, int]:
        return (self.time, self.source, self.seq)

    def __lt__(self, other: "Event") -> bool:
        # Scheduler-produced keys are unique; this keeps the heap total-ordered
        # even for hand-built duplicates.
        return self.sort_key < other.sort_key

    def __repr__(self) -> str:  # debugging aid only
        return (f"Event(t={self.time}, {self.source}#{self.seq} -> "
                f"{self.target}.{self.handler})")


class EventQueue:
    """Priority queue of events ordered by sort key."""

    __slots__ = ("_heap",)

    def __init__(self) -> None:
        self._heap: list[tuple[int, str, int, Event]] = []

    def push(self, event: Event) -> None:
        heapq.heappush(self._heap, (event.time, event.source, event.seq, event))

    def pop(self) -> Event:
        return heapq.heappop(self._heap)[3]

    def peek(self) -> Event:
        return self._heap[0][3]

    def min_time(self) -> int:
        """Timestamp of the earliest pending event, or INF_TIME if empty."""
        return self._heap[0][0] if self._heap else INF_TIME

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


def derive_stream_seed(global_seed: int, name: str) -> int:
    """Map (global seed, entity name) to a 128-bit stream seed.

    SHA-256 based so the mapping is identical on every platform and Python
    build; unrelated names give statistically independent streams.
    """
    digest = hashlib.sha256(f"{global_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "big")


class RngRegistry:
    """Per-entity random streams, all derived from one global seed.

    A stream is a plain ``random.Random`` (Mersenne Twister, stable across
    CPython versions) seeded from the entity name.  Draw order within one
    entity is its own business; other entities' draws never interleave with
    it, which is what makes traces partition-independent.
    """

    def __init__(self, global_seed: int) -> None:
        self.global_seed = global_seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            rng = random.Random(derive_stream_seed(self.global_seed, name))
            self._streams[name] = rng
        return rng

    def next_random(self, name: str) -> float:
        """One uniform draw in [0, 1) from the named entity's stream."""
        return self.stream(name).random()


def _key_digest(time: int, source: str, seq: int) -> int:
    d = hashlib.blake2b(f"{time}|{source}|{seq}".encode(), digest_size=16).digest()
    return int.from_bytes(d, "big")


class TraceDigest:
    """Order-insensitive digest of a set of executed sort keys.

    Workers execute disjoint slices of the global event set, each in ascending
    sort-key order.  Sort keys are unique, so multiset equality of executed
    keys across runs implies the merged ordered traces are equal; equality is
    checked as (count, xor of per-key 128-bit digests, sum mod 2**128).
    """

    __slots__ = ("count", "xor", "add")

    def __init__(self) -> None:
        self.count = 0
        self.xor = 0
        self.add = 0

    def update(self, time: int, source: str, seq: int) -> None:
        h = _key_digest(time, source, seq)
        self.count += 1
        self.xor ^= h
        self.add = (self.add + h) % (1 << 128)

    def merge(self, other: "TraceDigest") -> None:
        self.count += other.count
        self.xor ^= other.xor
        self.add = (self.add + other.add) % (1 << 128)

    def hexdigest(self) -> str:
        return f"{self.count:x}-{self.xor:032x}-{self.add:032x}"

    def as_dict(self) -> dict:
        return {"count": self.count, "xor": f"{self.xor:032x}", "add": f"{self.add:032x}"}


class Scheduler:
    """Per-worker timeline: entity registry, clock(s), and scheduling rules.

    Each worker instantiates the entities it owns but knows the owning worker
    of every entity in the network, so it can route cross-worker events to the
    outbox instead of its own queue.

    Two lanes exist to support the lagged-clock synchronization mode: lane 0
    ("main") holds routers, lane 1 ("lagged") holds boundary BSM nodes whose
    clock is allowed to trail the main clock.  In every other mode all
    entities live on lane 0 and lane 1 stays empty.
    """

    def __init__(self, worker_id: int, worker_of: dict[str, int],
                 rng: RngRegistry) -> None:
        self.worker_id = worker_id
        self.worker_of = worker_of
        self.rng = rng
        self.entities: dict[str, Any] = {}
        self.lane_of: dict[str, int] = {}
        self.queues = (EventQueue(), EventQueue())
        self.now = [0, 0]
        self.outbox: list[Event] = []
        self.trace = TraceDigest()
        self.executed_events = 0
        self._seq: dict[str, int] = {}
        self._trace_log: list[tuple[int, str, int]] | None = None

    # -- setup -------------------------------------------------------------

    def register(self, entity: Any, lane: int = MAIN_LANE) -> None:
        name = entity.name
        if self.worker_of.get(name) != self.worker_id:
            raise ValueError(f"entity {name!r} is not assigned to worker {self.worker_id}")
        self.entities[name] = entity
        self.lane_of[name] = lane

    def keep_full_trace(self) -> None:
        """Record every executed sort key (debugging; memory-heavy)."""
        self._trace_log = []

    @property
    def trace_log(self) -> list[tuple[int, str, int]] | None:
        return self._trace_log

    # -- scheduling --------------------------------------------------------

    def next_seq(self, source: str) -> int:
        n = self._seq.get(source, 0)
        self._seq[source] = n + 1
        return n

    def schedule(self, source: str, target: str, handler: str,
                 payload: dict, time: int) -> Event:
        """Create an event and route it (local queue, sibling lane, or outbox)."""
        dest = self.worker_of.get(target)
        if dest is None:
            raise UnknownEntity(target)
        src_lane = self.lane_of.get(source, MAIN_LANE)
        if time < self.now[src_lane]:
            raise SchedulingInPast(
                f"{source} scheduled {handler} at t={time} ps but its clock is "
                f"at {self.now[src_lane]} ps")
        event = Event(time, source, self.next_seq(source), target, handler,
                      payload, dest)
        self.emit(event)
        return event

    def emit(self, event: Event) -> None:
        if event.dest_worker != self.worker_id:
            self.outbox.append(event)
            return
        lane = self.lane_of.get(event.target, MAIN_LANE)
        # A same-worker event may hop lanes (router -> lagged BSM and back);
        # it must not land in the receiving lane's past.
        if event.time < self.now[lane]:
            raise CausalityViolation(
                f"event {event!r} targets lane {lane} at clock {self.now[lane]} ps")
        self.queues[lane].push(event)

    def merge_remote(self, events: Iterable[Event]) -> None:
        """Insert events received from other workers, checking causality."""
        for event in events:
            lane = self.lane_of.get(event.target, MAIN_LANE)
            if event.time < self.now[lane]:
                raise CausalityViolation(
                    f"received {event!r} behind lane-{lane} clock {self.now[lane]} ps")
            self.queues[lane].push(event)

    # -- execution ---------------------------------------------------------

    def execute(self, event: Event) -> None:
        entity = self.entities.get(event.target)
        if entity is None:
            raise UnknownEntity(event.target)
        self.executed_events += 1
        self.trace.update(event.time, event.source, event.seq)
        if self._trace_log is not None:
            self._trace_log.append(event.sort_key)
        getattr(entity, event.handler)(event.time, event.payload)

    def run_lane_until(self, lane: int, t_stop: int) -> int:
        """Execute lane events with time strictly below t_stop; returns count."""
        queue = self.queues[lane]
        now = self.now
        ran = 0
        while queue and queue.min_time() < t_stop:
            event = queue.pop()
            now[lane] = event.time
            self.execute(event)
            ran += 1
        now[lane] = t_stop
        return ran

    def run_until(self, t_stop: int) -> int:
        """Sequential driver: run the main lane to t_stop (exclusive)."""
        return self.run_lane_until(MAIN_LANE, t_stop)

    # -- parallel-loop helpers ----------------------------------------------

    def local_min_time(self) -> int:
        """Min over pending queue(s) and the outbox, INF_TIME when all empty."""
        m = min(self.queues[0].min_time(), self.queues[1].min_time())
        for event in self.outbox:
            if event.time < m:
                m = event.time
        return m

    def take_outbox(self) -> list[Event]:
        out, self.outbox = self.outbox, []
        return out
