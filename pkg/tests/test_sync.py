"""Window loops and transports: determinism, lagging, duplication, draining."""

import threading

import pytest

from pqnet.kernel import (INF_TIME, LAGGED_LANE, MAIN_LANE, CausalityViolation,
                          RngRegistry, Scheduler, TraceDigest)
from pqnet.qsm import LocalStateManager
from pqnet.sync import (CLASSICAL, QUANTUM, LaggedCutUnsupported, Link,
                        NoCrossTraffic, ThreadTransport, baseline_lookahead,
                        lagged_lookahead, run_lagged_loop, run_window_loop)


class TestLookaheadRules:
    def test_baseline_picks_min_cross_delay(self):
        links = [Link("a", "b", 700, QUANTUM), Link("b", "c", 400, CLASSICAL),
                 Link("a", "c", 900, CLASSICAL)]
        workers = {"a": 0, "b": 0, "c": 1}
        assert baseline_lookahead(links, workers) == 400

    def test_baseline_requires_cross_traffic(self):
        with pytest.raises(NoCrossTraffic):
            baseline_lookahead([Link("a", "b", 5, QUANTUM)], {"a": 0, "b": 0})

    def lagged_links(self):
        return [Link("r0", "b", 5_000_000, QUANTUM),
                Link("r1", "b", 5_000_000, QUANTUM),
                Link("b", "r0", 300_000_000, CLASSICAL),
                Link("b", "r1", 300_000_000, CLASSICAL),
                Link("r0", "r1", 300_000_000, CLASSICAL)]

    def test_lagged_halves_classical_delay(self):
        workers = {"r0": 0, "r1": 1, "b": 1}
        assert lagged_lookahead(self.lagged_links(), workers,
                                {"b"}) == 150_000_000

    def test_lagged_rejects_unlagged_quantum_cut(self):
        workers = {"r0": 0, "r1": 1, "b": 1}
        with pytest.raises(LaggedCutUnsupported):
            lagged_lookahead(self.lagged_links(), workers, set())

    def test_lagged_rejects_short_classical_link(self):
        links = self.lagged_links() + [Link("r0", "r1", 200_000_000, CLASSICAL)]
        workers = {"r0": 0, "r1": 1, "b": 1}
        with pytest.raises(LaggedCutUnsupported):
            lagged_lookahead(links, workers, {"b"})

    def test_lagged_rejects_quantum_out_of_lagged(self):
        links = self.lagged_links() + [Link("b", "r0", 5_000_000, QUANTUM)]
        workers = {"r0": 0, "r1": 1, "b": 1}
        with pytest.raises(LaggedCutUnsupported):
            lagged_lookahead(links, workers, {"b"})


class Chatter:
    """Relays tokens to pseudo-randomly chosen peers after a fixed delay."""

    def __init__(self, name, scheduler, peers, delay):
        self.name = name
        self.scheduler = scheduler
        self.peers = peers
        self.delay = delay

    def kick(self, tokens, hops):
        for i in range(tokens):
            self.scheduler.schedule(self.name, self.name, "handle_token",
                                    {"hops": hops}, i)

    def handle_token(self, time, payload):
        if payload["hops"] <= 0:
            return
        pick = self.scheduler.rng.next_random(self.name)
        peer = self.peers[int(pick * len(self.peers)) % len(self.peers)]
        self.scheduler.schedule(self.name, peer, "handle_token",
                                {"hops": payload["hops"] - 1},
                                time + self.delay)


DELAY = 100


def build_chatter_world(num_workers, seed=11, nodes=6):
    names = [f"node{i}" for i in range(nodes)]
    worker_of = {name: i % num_workers for i, name in enumerate(names)}
    schedulers = []
    for w in range(num_workers):
        sched = Scheduler(w, worker_of, RngRegistry(seed))
        for name in names:
            if worker_of[name] == w:
                peers = [p for p in names if p != name]
                sched.register(Chatter(name, sched, peers, DELAY))
        schedulers.append(sched)
    return schedulers


def run_parallel(schedulers, loop, lookahead, end_time, dup_factor=0):
    """Drive one loop per scheduler on worker threads; returns stats list."""
    transport = ThreadTransport(len(schedulers), dup_factor)
    results = [None] * len(schedulers)
    failures = []

    def drive(w):
        qsm = LocalStateManager(w)
        try:
            results[w] = loop(schedulers[w], qsm, transport, lookahead,
                              end_time)
        except BaseException as exc:  # surfaced by the caller
            failures.append(exc)
            transport.abort()

    threads = [threading.Thread(target=drive, args=(w,))
               for w in range(len(schedulers))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
        assert not t.is_alive(), "worker loop hung"
    if failures:
        raise failures[0]
    return results


def merged_digest(schedulers):
    total = TraceDigest()
    for sched in schedulers:
        total.merge(sched.trace)
    return total.hexdigest()


class TestBaselineLoop:
    END = 40 * DELAY

    def sequential_digest(self):
        (sched,) = build_chatter_world(1)
        sched.entities["node0"].kick(tokens=3, hops=30)
        sched.run_until(self.END)
        return sched.trace.hexdigest(), sched.executed_events

    @pytest.mark.parametrize("workers", [1, 2, 3, 6])
    def test_trace_matches_sequential(self, workers):
        want, want_events = self.sequential_digest()
        schedulers = build_chatter_world(workers)
        schedulers[0].entities["node0"].kick(tokens=3, hops=30)
        stats = run_parallel(schedulers, run_window_loop, DELAY, self.END)
        assert merged_digest(schedulers) == want
        assert sum(s["events_executed"] for s in stats) == want_events

    def test_window_count_is_horizon_over_lookahead(self):
        schedulers = build_chatter_world(2)
        schedulers[0].entities["node0"].kick(tokens=1, hops=100)
        stats = run_parallel(schedulers, run_window_loop, DELAY, self.END)
        assert all(s["windows"] == 40 for s in stats)

    def test_loop_breaks_when_drained(self):
        schedulers = build_chatter_world(2)
        schedulers[0].entities["node0"].kick(tokens=1, hops=4)
        stats = run_parallel(schedulers, run_window_loop, DELAY, self.END)
        # Tokens die after 4 hops; both workers see the infinite minimum
        # on the same iteration and stop early, in step.
        assert stats[0]["windows"] == stats[1]["windows"] < 40

    def test_duplication_changes_bytes_not_behavior(self):
        want, _ = self.sequential_digest()
        schedulers = build_chatter_world(3)
        schedulers[0].entities["node0"].kick(tokens=3, hops=30)
        stats = run_parallel(schedulers, run_window_loop, DELAY, self.END,
                             dup_factor=8)
        assert merged_digest(schedulers) == want
        for s in stats:
            assert s["exchange_dup_bytes"] == 8 * s["exchange_base_bytes"]

    def test_stats_buckets_cover_span(self):
        schedulers = build_chatter_world(2)
        schedulers[0].entities["node0"].kick(tokens=2, hops=20)
        stats = run_parallel(schedulers, run_window_loop, DELAY, self.END)
        for s in stats:
            parts = (s["computing_seconds"] + s["communicating_seconds"]
                     + s["waiting_seconds"] + s["socket_seconds"])
            assert parts == pytest.approx(s["span_seconds"], rel=0.05)


class Emitter:
    """Fires a photon at its station every period until the horizon."""

    def __init__(self, name, scheduler, station, flight, period):
        self.name = name
        self.scheduler = scheduler
        self.station = station
        self.flight = flight
        self.period = period
        self.heralds = []

    def kick(self, end_time):
        t = 0
        while t < end_time:
            self.scheduler.schedule(self.name, self.station, "handle_photon",
                                    {"origin": self.name}, t + self.flight)
            t += self.period

    def handle_herald(self, time, payload):
        self.heralds.append((time, payload["round"]))


class Station:
    """Pairs arriving photons and notifies both origins after a long delay."""

    def __init__(self, name, scheduler, notice):
        self.name = name
        self.scheduler = scheduler
        self.notice = notice
        self.waiting = None
        self.rounds = 0

    def handle_photon(self, time, payload):
        if self.waiting is None:
            self.waiting = payload["origin"]
            return
        first, self.waiting = self.waiting, None
        for origin in (first, payload["origin"]):
            self.scheduler.schedule(self.name, origin, "handle_herald",
                                    {"round": self.rounds}, time + self.notice)
        self.rounds += 1


FLIGHT = 5
NOTICE = 300
PERIOD = 40


def build_herald_world(num_workers, lagged=True):
    worker_of = {"r0": 0, "b": min(1, num_workers - 1),
                 "r1": min(1, num_workers - 1)}
    schedulers = []
    for w in range(num_workers):
        sched = Scheduler(w, worker_of, RngRegistry(5))
        if worker_of["r0"] == w:
            sched.register(Emitter("r0", sched, "b", FLIGHT, PERIOD))
        if worker_of["r1"] == w:
            sched.register(Emitter("r1", sched, "b", FLIGHT, PERIOD))
        if worker_of["b"] == w:
            lane = LAGGED_LANE if lagged and num_workers > 1 else MAIN_LANE
            sched.register(Station("b", sched, NOTICE), lane)
        schedulers.append(sched)
    return schedulers


class TestLaggedLoop:
    END = 1200

    def kicked(self, schedulers):
        for sched in schedulers:
            for name in ("r0", "r1"):
                if name in sched.entities:
                    sched.entities[name].kick(self.END)
        return schedulers

    def test_matches_sequential_trace(self):
        (solo,) = self.kicked(build_herald_world(1))
        solo.run_until(self.END)
        want = solo.trace.hexdigest()

        schedulers = self.kicked(build_herald_world(2))
        run_parallel(schedulers, run_lagged_loop, NOTICE // 2, self.END)
        assert merged_digest(schedulers) == want

    def test_matches_baseline_loop_trace(self):
        # Stations stay on the main lane under the baseline rule.
        baseline = self.kicked(build_herald_world(2, lagged=False))
        base_stats = run_parallel(baseline, run_window_loop, FLIGHT, self.END)

        lagged = self.kicked(build_herald_world(2))
        lag_stats = run_parallel(lagged, run_lagged_loop, NOTICE // 2,
                                 self.END)
        assert merged_digest(lagged) == merged_digest(baseline)
        assert all(s["windows"] == 240 for s in base_stats)
        assert all(s["windows"] == 9 for s in lag_stats)

    def test_rejects_nonpositive_lookahead(self):
        schedulers = build_chatter_world(1)
        qsm = LocalStateManager(0)
        with pytest.raises(ValueError):
            run_window_loop(schedulers[0], qsm, ThreadTransport(1), 0, 100)


class Rogue:
    """Schedules a cross-worker event closer than the claimed lookahead."""

    def __init__(self, name, scheduler, victim):
        self.name = name
        self.scheduler = scheduler
        self.victim = victim

    def kick(self):
        self.scheduler.schedule(self.name, self.name, "handle_tick", {}, 50)

    def handle_tick(self, time, payload):
        self.scheduler.schedule(self.name, self.victim, "handle_tick", {},
                                time + 1)

    def handle_nothing(self, time, payload):
        pass


class TestCausalityGuard:
    def test_undershooting_link_is_caught(self):
        worker_of = {"good": 0, "evil": 1}
        scheds = []
        for w in range(2):
            sched = Scheduler(w, worker_of, RngRegistry(1))
            name = "good" if w == 0 else "evil"
            sched.register(Rogue(name, sched, "good"))
            scheds.append(sched)
        scheds[1].entities["evil"].kick()
        with pytest.raises((CausalityViolation, threading.BrokenBarrierError)):
            run_parallel(scheds, run_window_loop, DELAY, 1000)
