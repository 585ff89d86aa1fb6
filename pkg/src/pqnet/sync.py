"""Conservative window synchronization across workers.

Workers advance through fixed-length windows.  Each iteration first swaps
outgoing events and queue minima with every other worker, then executes its
own events strictly below the new window edge, then fences with the state
server.  The window length (the lookahead) is the shortest cross-worker
link delay, so an event created inside a window can never be due before the
window after next; merging checks that invariant at runtime.

Two window rules exist:

* the baseline rule puts every entity on one lane and advances the edge by
  one lookahead per iteration;
* the lagged rule exploits heralding stations whose classical notices take
  far longer than their incoming photons: those stations run on a second
  lane trailing the main lane by one window, letting the window length grow
  to half the notice delay instead of the photon delay.

Both rules execute the same events with the same timestamps, so their
traces digest identically; only the window count changes.
"""

from __future__ import annotations

import socket as _socket
import threading
import time as _time
from collections import namedtuple
from typing import Iterable

from . import wire
from .kernel import (INF_TIME, LAGGED_LANE, MAIN_LANE, CausalityViolation,
                     Scheduler)
from .qsm import LocalStateManager

#: One directed link between entities, as the lookahead rules see it.
Link = namedtuple("Link", "src dst delay kind")

QUANTUM = "quantum"
CLASSICAL = "classical"


class NoCrossTraffic(ValueError):
    """A parallel run whose partition cuts no links has no finite lookahead."""


class LaggedCutUnsupported(ValueError):
    """The partition does not meet the lagged window rule's requirements."""


def baseline_lookahead(links: Iterable[Link], worker_of: dict[str, int]) -> int:
    """Shortest delay over links whose endpoints sit on different workers."""
    best = None
    for link in links:
        if worker_of[link.src] != worker_of[link.dst]:
            if best is None or link.delay < best:
                best = link.delay
    if best is None:
        raise NoCrossTraffic("no link crosses the partition")
    if best <= 0:
        raise ValueError(f"cross-worker link delay must be positive, got {best}")
    return best


def lagged_lookahead(links: Iterable[Link], worker_of: dict[str, int],
                     lagged: set[str]) -> int:
    """Half the shortest cross-worker classical delay, when that is safe.

    Requirements checked here:

    * every cross-worker quantum link must terminate at a lagged entity
      (its photons are absorbed by the trailing lane);
    * lagged entities receive quantum links and send classical ones, never
      the reverse across workers;
    * every other cross-worker link must be classical with delay at least
      twice the resulting window (so one window of slack always remains).
    """
    cross = [l for l in links
             if worker_of[l.src] != worker_of[l.dst]]
    if not cross:
        raise NoCrossTraffic("no link crosses the partition")
    notices = [l.delay for l in cross if l.kind == CLASSICAL
               and (l.src in lagged or l.dst in lagged)]
    if not notices:
        raise LaggedCutUnsupported(
            "no cross-worker notice link from a lagged entity to pace by")
    lookahead = min(notices) // 2
    if lookahead <= 0:
        raise LaggedCutUnsupported("notice delays too short to halve")
    for link in cross:
        if link.kind == QUANTUM:
            if link.dst not in lagged:
                raise LaggedCutUnsupported(
                    f"quantum link {link.src}->{link.dst} crosses workers "
                    f"without a lagged receiver")
            if link.src in lagged:
                raise LaggedCutUnsupported(
                    f"lagged entity {link.src} may not emit quantum links")
        elif link.delay < 2 * lookahead:
            raise LaggedCutUnsupported(
                f"classical link {link.src}->{link.dst} delay {link.delay} ps "
                f"below twice the window ({2 * lookahead} ps)")
    return lookahead


# -- transports ---------------------------------------------------------------

ExchangeResult = namedtuple(
    "ExchangeResult", "global_min events base_bytes dup_bytes wait_seconds")


class ThreadTransport:
    """All-to-all exchange between worker threads of one process.

    Frames take the same encoded form the socket transport puts on the
    network, so payloads reaching handlers are byte-for-byte identical in
    both modes.
    """

    def __init__(self, num_workers: int, dup_factor: int = 0) -> None:
        self.num_workers = num_workers
        self.dup_factor = dup_factor
        self._slots: list[dict[int, bytes | int] | None] = [None] * num_workers
        self._barrier = threading.Barrier(num_workers)

    def exchange(self, worker: int, local_min: int,
                 outbound: dict[int, list]) -> ExchangeResult:
        # Payload-free exchanges (the common case) carry the bare minimum:
        # an int is its own frame.  Sizes stay exact since an empty record
        # list serializes to zero accounted bytes anyway.
        frames: dict[int, bytes | int] = {}
        base_bytes = dup_bytes = 0
        for dest in range(self.num_workers):
            if dest == worker:
                continue
            events = outbound.get(dest, [])
            if not events:
                frames[dest] = local_min
                continue
            frame, base, dup = wire.encode_exchange(
                worker, local_min, events, self.dup_factor)
            frames[dest] = wire.encode_frame(frame)
            base_bytes += base
            dup_bytes += dup
        self._slots[worker] = frames
        t0 = _time.perf_counter()
        self._barrier.wait()
        wait = _time.perf_counter() - t0
        global_min = local_min
        events = []
        for src in range(self.num_workers):
            if src == worker:
                continue
            received = self._slots[src][worker]
            if isinstance(received, int):
                global_min = min(global_min, received)
                continue
            sender, peer_min, peer_events = wire.decode_exchange(
                wire.read_frame_bytes(received))
            assert sender == src
            global_min = min(global_min, peer_min)
            events.extend(peer_events)
        t1 = _time.perf_counter()
        self._barrier.wait()
        wait += _time.perf_counter() - t1
        return ExchangeResult(global_min, events, base_bytes, dup_bytes, wait)

    def abort(self) -> None:
        """Release peers blocked on the barrier after a worker failed."""
        self._barrier.abort()


class SocketTransport:
    """All-to-all exchange over per-pair TCP connections (one per peer)."""

    def __init__(self, worker: int, peers: dict[int, _socket.socket],
                 dup_factor: int = 0) -> None:
        self.worker = worker
        self.dup_factor = dup_factor
        self._files = {}
        for peer, sock in sorted(peers.items()):
            sock.setsockopt(_socket.IPPROTO_TCP, _socket.TCP_NODELAY, 1)
            self._files[peer] = sock.makefile("rwb")

    def exchange(self, worker: int, local_min: int,
                 outbound: dict[int, list]) -> ExchangeResult:
        base_bytes = dup_bytes = 0
        for peer, handle in self._files.items():
            frame, base, dup = wire.encode_exchange(
                worker, local_min, outbound.get(peer, []), self.dup_factor)
            handle.write(wire.encode_frame(frame))
            handle.flush()
            base_bytes += base
            dup_bytes += dup
        global_min = local_min
        events = []
        wait = 0.0
        for peer, handle in self._files.items():
            t0 = _time.perf_counter()
            frame = wire.read_frame(handle)
            wait += _time.perf_counter() - t0
            sender, peer_min, peer_events = wire.decode_exchange(frame)
            if sender != peer:
                raise CausalityViolation(
                    f"frame from worker {sender} on the link to {peer}")
            global_min = min(global_min, peer_min)
            events.extend(peer_events)
        return ExchangeResult(global_min, events, base_bytes, dup_bytes, wait)

    def close(self) -> None:
        for handle in self._files.values():
            try:
                handle.close()
            except OSError:
                pass


# -- window loops ---------------------------------------------------------------

def _group_outbox(scheduler: Scheduler) -> dict[int, list]:
    grouped: dict[int, list] = {}
    for event in scheduler.take_outbox():
        grouped.setdefault(event.dest_worker, []).append(event)
    return grouped


def _merge(scheduler: Scheduler, qsm: LocalStateManager, events: list) -> None:
    # Claim shipped state references as soon as the events carrying them
    # arrive; the handler may run windows later, but the ownership handoff
    # must complete within one barrier round.
    for event in events:
        payload = event.payload
        if isinstance(payload, dict):
            fragment = payload.get("qubit")
            if isinstance(fragment, dict) and fragment.get("mode") == "ref":
                qsm.receive_transfer(fragment)
    scheduler.merge_remote(events)


def _finish_stats(stats: dict, t_start: float, socket_before: float,
                  qsm: LocalStateManager, scheduler: Scheduler,
                  events_before: int) -> dict:
    span = _time.perf_counter() - t_start
    socket_after = qsm.client.socket_seconds if qsm.client else 0.0
    stats["span_seconds"] = span
    stats["socket_seconds"] = socket_after - socket_before
    stats["computing_seconds"] = max(
        0.0, span - stats["communicating_seconds"] - stats["waiting_seconds"]
        - stats["socket_seconds"])
    stats["events_executed"] = scheduler.executed_events - events_before
    return stats


def run_window_loop(scheduler: Scheduler, qsm: LocalStateManager, transport,
                    lookahead: int, end_time: int) -> dict:
    """Baseline rule: single lane, one lookahead per window."""
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    stats = {"windows": 0, "communicating_seconds": 0.0, "waiting_seconds": 0.0,
             "exchange_base_bytes": 0, "exchange_dup_bytes": 0}
    socket_before = qsm.client.socket_seconds if qsm.client else 0.0
    events_before = scheduler.executed_events
    t_start = _time.perf_counter()
    sync_time = 0
    while sync_time < end_time:
        t0 = _time.perf_counter()
        local_min = scheduler.local_min_time()
        outbound = _group_outbox(scheduler)
        result = transport.exchange(scheduler.worker_id, local_min, outbound)
        t1 = _time.perf_counter()
        stats["communicating_seconds"] += (t1 - t0) - result.wait_seconds
        stats["waiting_seconds"] += result.wait_seconds
        stats["exchange_base_bytes"] += result.base_bytes
        stats["exchange_dup_bytes"] += result.dup_bytes
        if result.global_min == INF_TIME:
            break
        if result.global_min < sync_time:
            raise CausalityViolation(
                f"pending event at {result.global_min} ps behind the window "
                f"edge {sync_time} ps")
        _merge(scheduler, qsm, result.events)
        sync_time = min(sync_time + lookahead, end_time)
        scheduler.run_lane_until(MAIN_LANE, sync_time)
        qsm.sync_barrier()
        stats["windows"] += 1
    return _finish_stats(stats, t_start, socket_before, qsm, scheduler,
                         events_before)


def run_lagged_loop(scheduler: Scheduler, qsm: LocalStateManager, transport,
                    lookahead: int, end_time: int) -> dict:
    """Lagged rule: heralding stations trail the main lane by one window."""
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    stats = {"windows": 0, "communicating_seconds": 0.0, "waiting_seconds": 0.0,
             "exchange_base_bytes": 0, "exchange_dup_bytes": 0}
    socket_before = qsm.client.socket_seconds if qsm.client else 0.0
    events_before = scheduler.executed_events
    t_start = _time.perf_counter()
    main_clock = 0
    lag_clock = 0
    while main_clock < end_time or lag_clock < end_time:
        t0 = _time.perf_counter()
        local_min = scheduler.local_min_time()
        outbound = _group_outbox(scheduler)
        result = transport.exchange(scheduler.worker_id, local_min, outbound)
        t1 = _time.perf_counter()
        stats["communicating_seconds"] += (t1 - t0) - result.wait_seconds
        stats["waiting_seconds"] += result.wait_seconds
        stats["exchange_base_bytes"] += result.base_bytes
        stats["exchange_dup_bytes"] += result.dup_bytes
        if result.global_min == INF_TIME:
            break
        if result.global_min < lag_clock:
            raise CausalityViolation(
                f"pending event at {result.global_min} ps behind the trailing "
                f"edge {lag_clock} ps")
        _merge(scheduler, qsm, result.events)
        if main_clock >= end_time:
            main_target = end_time
            lag_target = end_time
        else:
            main_target = min(main_clock + lookahead, end_time)
            lag_target = max(main_target - lookahead, 0)
        # The trailing lane catches up first: its events cannot schedule
        # into the main lane's past (their notices travel two windows).
        scheduler.run_lane_until(LAGGED_LANE, lag_target)
        scheduler.run_lane_until(MAIN_LANE, main_target)
        lag_clock = lag_target
        main_clock = main_target
        qsm.sync_barrier()
        stats["windows"] += 1
    return _finish_stats(stats, t_start, socket_before, qsm, scheduler,
                         events_before)
