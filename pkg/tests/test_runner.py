"""End-to-end driver checks: the three execution modes must agree bit for bit."""

import pytest

from pqnet import runner
from pqnet.config import config_hash, parse_config
from pqnet.runner import RunnerError, merged_trace, run
from pqnet.server import GlobalStateServer

MS = 1_000_000_000


def doc(size=4, workers=1, end_ms=1.0, seed=7, **extra):
    base = {
        "topology": {"kind": "linear", "size": size},
        "flows": {"kind": "end_to_end"},
        "seed": seed,
        "end_time_ms": end_ms,
        "workers": workers,
    }
    base.update(extra)
    return base


class TestSequential:
    def test_report_shape(self):
        report = run(doc(size=2))
        assert report["mode"] == "sequential"
        assert report["workers"] == 1
        assert report["windows"] == 0
        assert report["lookahead_ps"] is None
        assert report["audit_violations"] is None
        assert report["events_executed"] > 0
        assert len(report["per_worker"]) == 1
        assert report["per_worker"][0]["events_executed"] == report["events_executed"]
        assert report["config_hash"] == config_hash(parse_config(doc(size=2)))
        assert report["qsm"]["forwarded_requests"] == 0
        assert report["qsm"]["local_fraction"] == 1.0
        assert report["qsm"]["messages_to_server"] == 0
        assert "traces" not in report

    def test_delivers_pairs(self):
        report = run(doc(size=2, end_ms=1.0))
        flow = report["deliveries"]["0"]
        assert flow["delivered"] > 0
        assert flow["first_ps"] == 302_500_000
        assert flow["last_ps"] < 1 * MS

    def test_debug_audit_clean(self):
        report = run(doc(size=2), debug=True)
        assert report["audit_violations"] == 0

    def test_trace_capture(self):
        report = run(doc(size=2), keep_trace=True)
        trace = merged_trace(report)
        assert len(trace) == report["events_executed"]
        assert trace == sorted(trace)

    def test_same_seed_same_digest(self):
        first = run(doc(size=3))
        second = run(doc(size=3))
        assert first["trace_digest"] == second["trace_digest"]
        assert first["deliveries"] == second["deliveries"]
        assert run(doc(size=3, seed=8))["trace_digest"] != first["trace_digest"]


class TestThreads:
    def test_matches_sequential(self):
        serial = run(doc(workers=1), keep_trace=True)
        parallel = run(doc(workers=2), keep_trace=True, debug=True)
        assert parallel["mode"] == "threads"
        assert parallel["lookahead_ps"] == 2_500_000
        assert parallel["trace_digest"] == serial["trace_digest"]
        assert parallel["events_executed"] == serial["events_executed"]
        assert parallel["deliveries"] == serial["deliveries"]
        assert merged_trace(parallel) == merged_trace(serial)
        assert parallel["audit_violations"] == 0
        assert parallel["windows"] == 400

    def test_half_classical_matches(self):
        serial = run(doc(workers=1))
        lagged = run(doc(workers=2, lookahead="half_classical"), debug=True)
        assert lagged["lookahead_ps"] == 150_000_000
        assert lagged["trace_digest"] == serial["trace_digest"]
        assert lagged["deliveries"] == serial["deliveries"]
        assert lagged["audit_violations"] == 0
        assert lagged["windows"] < 10

    def test_four_workers_on_eight_routers(self):
        serial = run(doc(size=8, workers=1, end_ms=0.7))
        parallel = run(doc(size=8, workers=4, end_ms=0.7))
        assert parallel["trace_digest"] == serial["trace_digest"]
        assert parallel["deliveries"] == serial["deliveries"]

    def test_duplication_inflates_bytes_only(self):
        plain = run(doc(workers=2))
        padded = run(doc(workers=2, features={"duplication_factor": 3}))
        assert padded["trace_digest"] == plain["trace_digest"]
        assert padded["deliveries"] == plain["deliveries"]
        assert plain["exchange_dup_bytes"] == 0
        assert padded["exchange_base_bytes"] == plain["exchange_base_bytes"]
        assert padded["exchange_dup_bytes"] == 3 * padded["exchange_base_bytes"]

    def test_offload_disabled_never_local_on_transferred(self):
        report = run(doc(workers=2, features={"offloading": False}))
        assert report["qsm"]["touch_transferred"] > 0
        assert report["qsm"]["touch_transferred_local"] == 0

    def test_batching_off_costs_messages(self):
        on = run(doc(workers=2))
        off = run(doc(workers=2, features={"batching": False}))
        assert on["trace_digest"] == off["trace_digest"]
        assert on["qsm"]["messages_to_server"] < off["qsm"]["messages_to_server"]

    def test_worker_failure_is_attributed(self):
        bad = doc(workers=2, server="127.0.0.1:9")
        with pytest.raises(RunnerError) as info:
            run(bad)
        assert info.value.failures
        assert set(info.value.failures) <= {0, 1}

    def test_external_server_endpoint(self, monkeypatch):
        server = GlobalStateServer()
        host, port = server.serve_tcp()
        monkeypatch.setenv(runner.ENDPOINT_ENV, f"{host}:{port}")
        try:
            report = run(doc(workers=2))
            assert report["trace_digest"] == run(doc(workers=1))["trace_digest"]
        finally:
            monkeypatch.delenv(runner.ENDPOINT_ENV)
            server.stop()


class TestProcesses:
    def test_matches_sequential(self):
        serial = run(doc(end_ms=0.5, workers=1))
        parallel = run(doc(end_ms=0.5, workers=2, transport="processes"),
                       debug=True)
        assert parallel["mode"] == "processes"
        assert parallel["trace_digest"] == serial["trace_digest"]
        assert parallel["events_executed"] == serial["events_executed"]
        assert parallel["deliveries"] == serial["deliveries"]
        assert parallel["audit_violations"] == 0
        assert parallel["per_worker"][0]["worker"] == 0
        assert parallel["per_worker"][1]["worker"] == 1
