"""Execution drivers: run a configured network in-process, on worker
threads, or on worker processes, and assemble one report either way.

The driver owns lifecycle only.  Everything that affects simulation output
lives below it (planner, kernel, window loops), so the three modes differ
in plumbing alone: who hosts the global state server, how exchange frames
move, and where per-worker results come back from.  A run with ``workers=1``
never builds a server or a transport; it is the recurring baseline the
parallel modes are checked against, so it stays free of their machinery.
"""

from __future__ import annotations

import multiprocessing
import os
import queue as _queue
import socket as _socket
import threading
import time
import traceback

from . import sync
from .config import Materials, RunConfig, config_hash, materialize, parse_config
from .kernel import RngRegistry, Scheduler, TraceDigest
from .models import build_worker, collect_deliveries, compute_lookahead, merge_deliveries
from .qsm import LocalStateManager
from .server import GlobalStateServer, ServerClient, open_channel

ENDPOINT_ENV = "PQNET_SERVER_ENDPOINT"

# Rendezvous allowances for process mode.  Interpreter spawn plus imports
# dominate the first; a full window between progress messages the second.
SPAWN_TIMEOUT = 120.0
RESULT_TIMEOUT = 600.0


class RunnerError(RuntimeError):
    """A worker failed.  ``failures`` maps worker id to its traceback text."""

    def __init__(self, failures: dict[int, str]) -> None:
        first = min(failures)
        head = failures[first].strip().splitlines()[-1]
        super().__init__(f"worker {first} failed: {head}"
                         + (f" (+{len(failures) - 1} more)" if len(failures) > 1 else ""))
        self.failures = failures


def _resolve_endpoint(config: RunConfig) -> str | None:
    """External server endpoint, if any; None means host one ourselves."""
    return os.environ.get(ENDPOINT_ENV) or config.server


def _drive(materials: Materials, worker_id: int, qsm: LocalStateManager,
           transport, lookahead: int, *, keep_trace: bool) -> dict:
    """Build one worker's slice and run it to the end time; returns payload."""
    config = materials.config
    scheduler = Scheduler(worker_id, materials.plan.worker_of, RngRegistry(config.seed))
    if keep_trace:
        scheduler.keep_full_trace()
    lagged = config.lookahead == "half_classical"
    entities = build_worker(materials.plan, worker_id, scheduler, qsm,
                            lagged_mode=lagged,
                            purify=config.features.purification)
    loop = sync.run_lagged_loop if lagged else sync.run_window_loop
    stats = loop(scheduler, qsm, transport, lookahead, config.end_time_ps)
    return _payload(worker_id, scheduler, qsm, entities, stats, keep_trace)


def _payload(worker_id: int, scheduler: Scheduler, qsm: LocalStateManager,
             entities: dict, stats: dict, keep_trace: bool) -> dict:
    counters = dict(qsm.counters)
    counters["messages_to_server"] = qsm.client.messages if qsm.client else 0
    return {"worker": worker_id,
            "stats": stats,
            "qsm": counters,
            "deliveries": collect_deliveries(entities),
            "digest": scheduler.trace.as_dict(),
            "trace": list(scheduler.trace_log) if keep_trace else None}


# -- sequential ---------------------------------------------------------------

def _run_sequential(materials: Materials, *, debug: bool, keep_trace: bool):
    config = materials.config
    features = config.features
    scheduler = Scheduler(0, materials.plan.worker_of, RngRegistry(config.seed))
    if keep_trace:
        scheduler.keep_full_trace()
    qsm = LocalStateManager(0, None, batching=features.batching,
                            offload=features.offloading, debug=debug,
                            run_seed=config.seed)
    entities = build_worker(materials.plan, 0, scheduler, qsm,
                            purify=features.purification)
    start = time.perf_counter()
    executed = scheduler.run_until(config.end_time_ps)
    span = time.perf_counter() - start
    stats = {"windows": 0, "communicating_seconds": 0.0, "waiting_seconds": 0.0,
             "exchange_base_bytes": 0, "exchange_dup_bytes": 0,
             "socket_seconds": 0.0, "span_seconds": span,
             "computing_seconds": span, "events_executed": executed}
    violations = len(qsm.audit()) if debug else None
    return [_payload(0, scheduler, qsm, entities, stats, keep_trace)], violations


# -- worker threads -----------------------------------------------------------

def _run_threads(materials: Materials, *, debug: bool, keep_trace: bool):
    config = materials.config
    features = config.features
    workers = config.workers
    lookahead = compute_lookahead(materials.plan, config.lookahead)
    endpoint = _resolve_endpoint(config)
    server = (None if endpoint
              else GlobalStateServer(debug=debug, audit_workers=workers))
    transport = sync.ThreadTransport(workers, features.duplication_factor)
    payloads: list[dict | None] = [None] * workers
    failures: dict[int, str] = {}
    aborted: list[int] = []

    def work(worker_id: int) -> None:
        client = None
        try:
            channel = (open_channel(endpoint) if endpoint
                       else server.connect_local())
            client = ServerClient(worker_id, channel)
            qsm = LocalStateManager(worker_id, client, batching=features.batching,
                                    offload=features.offloading, debug=debug,
                                    run_seed=config.seed)
            payloads[worker_id] = _drive(materials, worker_id, qsm, transport,
                                         lookahead, keep_trace=keep_trace)
        except threading.BrokenBarrierError:
            aborted.append(worker_id)
        except BaseException:
            failures[worker_id] = traceback.format_exc()
            transport.abort()
        finally:
            if endpoint and client is not None:
                client.close()

    threads = [threading.Thread(target=work, args=(i,), name=f"worker-{i}")
               for i in range(workers)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    violations = None
    if server is not None:
        if not failures:
            violations = server.stats_snapshot()["violations"] if debug else None
        server.stop()
    if failures:
        raise RunnerError(failures)
    return payloads, violations


# -- worker processes ---------------------------------------------------------

def _recv_exact(sock: _socket.socket, count: int) -> bytes:
    chunks = b""
    while len(chunks) < count:
        piece = sock.recv(count - len(chunks))
        if not piece:
            raise ConnectionError("peer closed during mesh handshake")
        chunks += piece
    return chunks


def _mesh_connect(worker_id: int, workers: int, listener: _socket.socket,
                  ports: dict[int, int]) -> dict[int, _socket.socket]:
    """Pairwise sockets: dial every lower id, accept every higher one.

    A 4-byte id header on each dialed connection tells the acceptor who
    called, since accept order is arbitrary.
    """
    peers: dict[int, _socket.socket] = {}
    for peer in range(worker_id):
        sock = _socket.create_connection(("127.0.0.1", ports[peer]), timeout=60)
        sock.sendall(worker_id.to_bytes(4, "big"))
        sock.settimeout(None)
        peers[peer] = sock
    listener.settimeout(60)
    for _ in range(worker_id + 1, workers):
        conn, _addr = listener.accept()
        conn.settimeout(60)
        peer = int.from_bytes(_recv_exact(conn, 4), "big")
        conn.settimeout(None)
        peers[peer] = conn
    listener.close()
    return peers


def _process_worker_main(worker_id: int, doc: dict, endpoint: str,
                         debug: bool, keep_trace: bool,
                         up_queue, down_queue) -> None:
    """Child entry point; reports exactly one result or error message."""
    try:
        config = parse_config(doc)
        materials = materialize(config)
        features = config.features
        listener = _socket.create_server(("127.0.0.1", 0))
        up_queue.put(("port", worker_id, listener.getsockname()[1]))
        ports = down_queue.get(timeout=SPAWN_TIMEOUT)
        peers = _mesh_connect(worker_id, config.workers, listener, ports)
        transport = sync.SocketTransport(worker_id, peers,
                                         features.duplication_factor)
        client = ServerClient(worker_id, open_channel(endpoint))
        qsm = LocalStateManager(worker_id, client, batching=features.batching,
                                offload=features.offloading, debug=debug,
                                run_seed=config.seed)
        lookahead = compute_lookahead(materials.plan, config.lookahead)
        try:
            payload = _drive(materials, worker_id, qsm, transport, lookahead,
                             keep_trace=keep_trace)
        finally:
            transport.close()
            client.close()
        up_queue.put(("result", worker_id, payload))
    except BaseException:
        up_queue.put(("error", worker_id, traceback.format_exc()))
    finally:
        up_queue.close()
        up_queue.join_thread()


def _run_processes(materials: Materials, *, debug: bool, keep_trace: bool):
    config = materials.config
    workers = config.workers
    endpoint = _resolve_endpoint(config)
    server = None
    if endpoint is None:
        server = GlobalStateServer(debug=debug, audit_workers=workers)
        host, port = server.serve_tcp()
        endpoint = f"{host}:{port}"
    context = multiprocessing.get_context("spawn")
    up_queue = context.Queue()
    down_queues = [context.Queue() for _ in range(workers)]
    doc = config.as_dict()
    processes = [context.Process(target=_process_worker_main,
                                 args=(i, doc, endpoint, debug, keep_trace,
                                       up_queue, down_queues[i]),
                                 daemon=True, name=f"worker-{i}")
                 for i in range(workers)]
    payloads: list[dict] = []
    failures: dict[int, str] = {}

    def take(timeout: float) -> tuple:
        try:
            return up_queue.get(timeout=timeout)
        except _queue.Empty:
            for process in processes:
                if process.exitcode not in (None, 0):
                    number = int(process.name.split("-")[1])
                    failures.setdefault(
                        number, f"exited with code {process.exitcode}")
            failures.setdefault(-1, f"no worker message within {timeout:.0f}s")
            raise RunnerError(failures) from None

    try:
        for process in processes:
            process.start()
        ports: dict[int, int] = {}
        while len(ports) < workers:
            kind, worker_id, body = take(SPAWN_TIMEOUT)
            if kind == "error":
                failures[worker_id] = body
                raise RunnerError(failures)
            ports[worker_id] = body
        for queue in down_queues:
            queue.put(ports)
        for _ in range(workers):
            kind, worker_id, body = take(RESULT_TIMEOUT)
            if kind == "result":
                payloads.append(body)
            else:
                failures[worker_id] = body
        for process in processes:
            process.join(30)
    finally:
        for process in processes:
            if process.is_alive():
                process.terminate()
        violations = None
        if server is not None:
            if not failures:
                violations = server.stats_snapshot()["violations"] if debug else None
            server.stop()
    if failures:
        raise RunnerError(failures)
    payloads.sort(key=lambda p: p["worker"])
    return payloads, violations


# -- report assembly ----------------------------------------------------------

def _merged_digest(payloads: list[dict]) -> str:
    total = TraceDigest()
    for payload in payloads:
        part = TraceDigest()
        part.count = payload["digest"]["count"]
        part.xor = int(payload["digest"]["xor"], 16)
        part.add = int(payload["digest"]["add"], 16)
        total.merge(part)
    return total.hexdigest()


def _assemble(config: RunConfig, mode: str, payloads: list[dict],
              wall_seconds: float, lookahead_ps: int | None,
              violations: int | None) -> dict:
    payloads = sorted(payloads, key=lambda p: p["worker"])
    rows = []
    qsm_totals = {"local_requests": 0, "forwarded_requests": 0,
                  "touch_transferred": 0, "touch_transferred_local": 0,
                  "messages_to_server": 0}
    for payload in payloads:
        stats, counters = payload["stats"], payload["qsm"]
        handled = counters["local"] + counters["forwarded"]
        rows.append({"worker": payload["worker"],
                     "events_executed": stats["events_executed"],
                     "windows": stats["windows"],
                     "span_seconds": stats["span_seconds"],
                     "computing_seconds": stats["computing_seconds"],
                     "communicating_seconds": stats["communicating_seconds"],
                     "waiting_seconds": stats["waiting_seconds"],
                     "socket_seconds": stats["socket_seconds"],
                     "exchange_base_bytes": stats["exchange_base_bytes"],
                     "exchange_dup_bytes": stats["exchange_dup_bytes"],
                     "qsm_local": counters["local"],
                     "qsm_forwarded": counters["forwarded"],
                     "qsm_touch_transferred": counters["touch_transferred"],
                     "qsm_touch_transferred_local": counters["touch_transferred_local"],
                     "messages_to_server": counters["messages_to_server"],
                     "server_request_fraction": (
                         counters["forwarded"] / handled if handled else 0.0)})
        qsm_totals["local_requests"] += counters["local"]
        qsm_totals["forwarded_requests"] += counters["forwarded"]
        qsm_totals["touch_transferred"] += counters["touch_transferred"]
        qsm_totals["touch_transferred_local"] += counters["touch_transferred_local"]
        qsm_totals["messages_to_server"] += counters["messages_to_server"]
    handled = qsm_totals["local_requests"] + qsm_totals["forwarded_requests"]
    qsm_totals["local_fraction"] = (
        qsm_totals["local_requests"] / handled if handled else 1.0)
    qsm_totals["server_request_fraction"] = 1.0 - qsm_totals["local_fraction"]
    report = {"config": config.as_dict(),
              "config_hash": config_hash(config),
              "mode": mode,
              "workers": config.workers,
              "lookahead_mode": config.lookahead,
              "lookahead_ps": lookahead_ps,
              "end_time_ps": config.end_time_ps,
              "wall_seconds": wall_seconds,
              "events_executed": sum(r["events_executed"] for r in rows),
              "windows": max((r["windows"] for r in rows), default=0),
              "trace_digest": _merged_digest(payloads),
              "audit_violations": violations,
              "deliveries": merge_deliveries([p["deliveries"] for p in payloads]),
              "qsm": qsm_totals,
              "exchange_base_bytes": sum(r["exchange_base_bytes"] for r in rows),
              "exchange_dup_bytes": sum(r["exchange_dup_bytes"] for r in rows),
              "per_worker": rows}
    if any(payload["trace"] is not None for payload in payloads):
        report["traces"] = {payload["worker"]: payload["trace"]
                            for payload in payloads}
    return report


def merged_trace(report: dict) -> list[tuple[int, str, int]]:
    """All captured sort keys in one ascending sequence.

    Workers record execution order, which within one queue is not globally
    sorted (a handler may insert ahead of later-keyed events already run).
    Sort keys are unique, so sorting gives the canonical order and two runs
    executed the same events iff these sequences are equal.
    """
    merged: list[tuple[int, str, int]] = []
    for log in (report.get("traces") or {}).values():
        merged.extend(tuple(entry) for entry in log)
    merged.sort()
    return merged


def run(config: RunConfig | dict, *, debug: bool = False,
        keep_trace: bool = False) -> dict:
    """Simulate one configuration end to end and return its report.

    ``debug`` turns on the cross-worker ownership audit at every window
    barrier (and a local hygiene walk in sequential runs); the report's
    ``audit_violations`` is then a count, otherwise None.  ``keep_trace``
    records every executed sort key per worker under ``"traces"``; memory
    grows with event count, so leave it off outside determinism checks.
    """
    if isinstance(config, dict):
        config = parse_config(config)
    materials = materialize(config)
    start = time.perf_counter()
    if config.workers == 1:
        mode = "sequential"
        lookahead_ps = None
        payloads, violations = _run_sequential(materials, debug=debug,
                                               keep_trace=keep_trace)
    elif config.transport == "threads":
        mode = "threads"
        lookahead_ps = compute_lookahead(materials.plan, config.lookahead)
        payloads, violations = _run_threads(materials, debug=debug,
                                            keep_trace=keep_trace)
    else:
        mode = "processes"
        lookahead_ps = compute_lookahead(materials.plan, config.lookahead)
        payloads, violations = _run_processes(materials, debug=debug,
                                              keep_trace=keep_trace)
    wall = time.perf_counter() - start
    return _assemble(config, mode, payloads, wall, lookahead_ps, violations)
