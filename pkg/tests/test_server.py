"""State server: channels, locking, sessions, batching, replay equivalence."""

import random
import threading
import time

import numpy as np
import pytest

from pqnet import wire
from pqnet.quantum import Circuit, bell_amps
from pqnet.server import (BindFailure, GlobalStateServer, ProtocolError,
                          ServerClient, ServerUnavailable, global_key_audit,
                          open_channel, replay_oplog)

ZERO = np.array([1, 0], dtype=complex)


@pytest.fixture
def tcp_server():
    server = GlobalStateServer(debug=True)
    host, port = server.serve_tcp()
    yield server, f"{host}:{port}"
    server.stop()


def make_client(endpoint, worker):
    return ServerClient(worker, open_channel(endpoint))


class TestChannels:
    def test_tcp_round_trip(self, tcp_server):
        server, endpoint = tcp_server
        client = make_client(endpoint, 0)
        client.send_silent(client.make_transfer_in(("a", "b"), bell_amps()))
        snap = client.get("a")
        assert set(snap.keys) == {"a", "b"}
        assert np.allclose(snap.amps, bell_amps())

    def test_unreachable_endpoint(self):
        with pytest.raises(ServerUnavailable):
            open_channel("local:never-registered")

    def test_duplicate_local_id(self):
        first = GlobalStateServer()
        first.register_local("dup-id")
        second = GlobalStateServer()
        try:
            with pytest.raises(BindFailure):
                second.register_local("dup-id")
        finally:
            first.stop()

    def test_port_collision(self, tcp_server):
        server, endpoint = tcp_server
        port = int(endpoint.rsplit(":", 1)[1])
        other = GlobalStateServer()
        with pytest.raises(BindFailure):
            other.serve_tcp(port=port)


class TestProtocolRules:
    def test_request_ids_must_increase(self, tcp_server):
        server, endpoint = tcp_server
        seed = make_client(endpoint, 1)
        seed.send_silent(seed.make_transfer_in(("x",), ZERO))
        channel = open_channel(endpoint)
        msg = wire.request(wire.KIND_GET, worker=0, req_id=5, key="x")
        channel.send(wire.encode_frame(msg))
        assert channel.recv()["ok"] is True
        channel.send(wire.encode_frame(msg))
        resp = channel.recv()
        assert resp["ok"] is False and "not increasing" in resp["error"]

    def test_get_unknown_key(self, tcp_server):
        server, endpoint = tcp_server
        with pytest.raises(ProtocolError, match="no server state"):
            make_client(endpoint, 0).get("nope")

    def test_duplicate_transfer_rejected(self, tcp_server):
        server, endpoint = tcp_server
        client = make_client(endpoint, 0)
        body = client.make_transfer_in(("a",), ZERO)
        client.batch([body])
        with pytest.raises(ProtocolError, match="already-registered"):
            client.batch([client.make_transfer_in(("a",), ZERO)])

    def test_batch_rejects_response_kinds_with_index(self, tcp_server):
        server, endpoint = tcp_server
        client = make_client(endpoint, 0)
        good = client.make_transfer_in(("k",), ZERO)
        bad = client._request(wire.KIND_GET, key="k")
        with pytest.raises(ProtocolError, match="index 1"):
            client.batch([good, bad])
        # Bodies before the failing one were applied.
        assert set(server.registry_snapshot()) == {"k"}

    def test_terminate_returns_stats(self, tcp_server):
        server, endpoint = tcp_server
        client = make_client(endpoint, 0)
        client.send_silent(client.make_transfer_in(("a",), ZERO))
        stats = client.terminate()
        assert stats["keys"] == 1
        assert stats["requests"][wire.KIND_TRANSFER_IN] == 1

    def test_sync_reports_violation_counter(self, tcp_server):
        server, endpoint = tcp_server
        assert make_client(endpoint, 0).sync() == 0

    def test_audit_waits_for_whole_cohort(self):
        # A lone early audit must not be compared against keys the
        # not-yet-synced worker holds; that is a false positive.
        server = GlobalStateServer(debug=True, audit_workers=2)
        try:
            first = ServerClient(0, server.connect_local())
            second = ServerClient(1, server.connect_local())
            second.send_silent(second.make_transfer_in(("a", "b"), bell_amps()))
            assert first.sync(global_key_audit([])) == 0
            assert second.sync(global_key_audit(["a", "b"])) == 0
            assert server.stats_snapshot()["violations"] == 0
            # Completed cohorts still catch genuinely unclaimed keys.
            first.sync(global_key_audit([]))
            second.sync(global_key_audit(["a"]))
            assert server.stats_snapshot()["violations"] == 1
        finally:
            server.stop()


class TestLocking:
    def test_closure_retry_on_concurrent_merge(self, tcp_server):
        server, endpoint = tcp_server
        setup = make_client(endpoint, 9)
        setup.batch([setup.make_transfer_in(("x",), ZERO),
                     setup.make_transfer_in(("y",), ZERO)])

        snapshotted = threading.Event()
        merged = threading.Event()
        fired = []

        def hook():
            if not fired:
                fired.append(True)
                snapshotted.set()
                assert merged.wait(10)

        server._after_snapshot = hook
        slow = make_client(endpoint, 0)
        errors = []

        def flip_x():
            try:
                slow.run(Circuit(1, [("X", (0,))]), ["x"], None, True)
            except ProtocolError as exc:
                errors.append(exc)

        worker = threading.Thread(target=flip_x)
        worker.start()
        assert snapshotted.wait(10)
        server._after_snapshot = None
        fast = make_client(endpoint, 1)
        fast.run(Circuit(2, [("CNOT", (0, 1))]), ["x", "y"], None, True)
        merged.set()
        worker.join(10)
        assert not errors
        assert server.stats_snapshot()["lock_retries"] >= 1
        snap = server.registry_snapshot()
        assert snap["x"] == snap["y"]
        keys, values = snap["x"]
        assert set(keys) == {"x", "y"}
        # CNOT on |00> is identity, then X on x: |10> (x is the high bit).
        ordered = values if keys == ("x", "y") else (values[0], values[2],
                                                     values[1], values[3])
        assert np.allclose(ordered, [0, 0, 1, 0])

    def test_run_blocks_only_its_closure(self, tcp_server):
        server, endpoint = tcp_server
        setup = make_client(endpoint, 9)
        setup.batch([setup.make_transfer_in(("a", "b"), bell_amps()),
                     setup.make_transfer_in(("c",), ZERO)])
        slow = make_client(endpoint, 0)
        fast = make_client(endpoint, 1)
        done_order = []

        def long_touch():
            slow.run(Circuit(1, [("Z", (0,))]), ["a"], None, True,
                     test_delay_ms=300)
            done_order.append("slow")

        thread = threading.Thread(target=long_touch)
        thread.start()
        time.sleep(0.05)
        fast.run(Circuit(1, [("X", (0,))]), ["c"], None, True)
        done_order.append("fast")
        thread.join(10)
        assert done_order == ["fast", "slow"]


class TestReplayOracle:
    def run_worker(self, endpoint, worker, ops):
        rng = random.Random(1000 + worker)
        client = make_client(endpoint, worker)
        own = 0
        pairs = []
        for _ in range(ops):
            roll = rng.random()
            if roll < 0.35 or not pairs:
                mem, ph = f"w{worker}m{own}", f"w{worker}p{own}"
                own += 1
                client.send_silent(client.make_transfer_in((mem, ph),
                                                           bell_amps()))
                pairs.append((mem, ph))
            elif roll < 0.6:
                mem, ph = pairs[rng.randrange(len(pairs))]
                gate = rng.choice(["X", "H", "S", "Z"])
                client.run(Circuit(2, [(gate, (0,))]), [mem, ph], None, True)
            elif roll < 0.8:
                mem, ph = pairs.pop(rng.randrange(len(pairs)))
                client.run(Circuit(2, measured=(0, 1)), [mem, ph],
                           rng.random(), True)
            else:
                # Contended traffic: everyone hammers one shared key.
                client.run(Circuit(1, [("H", (0,))]), ["shared"], None, True)
        # Fence before closing: a trailing one-way transfer could otherwise
        # still be in flight when the main thread snapshots the registry.
        client.sync()
        client.close()

    def test_concurrent_history_replays_identically(self, tcp_server):
        server, endpoint = tcp_server
        boot = make_client(endpoint, 99)
        boot.send_silent(boot.make_transfer_in(("shared",), ZERO))
        boot.sync()
        threads = [threading.Thread(target=self.run_worker,
                                    args=(endpoint, w, 100))
                   for w in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(60)
            assert not t.is_alive(), "worker thread hung"
        live = server.registry_snapshot()
        rebuilt = replay_oplog(server.oplog).registry_snapshot()
        assert set(live) == set(rebuilt)
        for key in live:
            assert live[key][0] == rebuilt[key][0]
            assert live[key][1] == rebuilt[key][1], key
