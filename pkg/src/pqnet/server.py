"""Centralized manager for quantum states shared across workers.

One server per run (only started when there is more than one worker).  Each
worker holds a single session; requests on a session are served in arrival
order (FIFO per worker), while different sessions run concurrently on their
own threads.  State safety comes from per-qubit-key locks: an operation locks
the entanglement closure of the keys it touches, acquiring locks in ascending
key order so overlapping operations serialize instead of deadlocking.

Two channel flavors exist behind one interface: TCP (``host:port``) for
process workers and an in-host channel (``local:<id>``) for thread workers.
Both move the exact same encoded frames.
"""

from __future__ import annotations

import hashlib
import io
import queue
import socket
import threading
import time as _time
from typing import Callable

import numpy as np

from . import wire
from .quantum import Circuit, Ket, UnitaryMemo, apply

CLOSURE_RETRY_LIMIT = 64


class BindFailure(OSError):
    """The requested TCP endpoint could not be bound."""


class ProtocolError(RuntimeError):
    """The peer broke a protocol rule (bad id, bad kind, bad body)."""


class ServerUnavailable(RuntimeError):
    """No server is reachable at the configured endpoint."""


# -- channels -----------------------------------------------------------------

class TcpChannel:
    """Blocking frame channel over a connected socket."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._file = sock.makefile("rwb")

    def send(self, data: bytes) -> None:
        self._file.write(data)
        self._file.flush()

    def recv(self) -> dict:
        return wire.read_frame(self._file)

    def close(self) -> None:
        try:
            self._file.close()
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class LocalChannel:
    """In-host frame channel: two byte queues, same framing as TCP."""

    _CLOSE = object()

    def __init__(self) -> None:
        self._to_server: queue.Queue = queue.Queue()
        self._to_client: queue.Queue = queue.Queue()

    # client side
    def send(self, data: bytes) -> None:
        self._to_server.put(data)

    def recv(self) -> dict:
        data = self._to_client.get()
        if data is self._CLOSE:
            raise EOFError("channel closed")
        return wire.read_frame(io.BytesIO(data))

    def close(self) -> None:
        self._to_server.put(self._CLOSE)

    # server side
    def _server_send(self, data: bytes) -> None:
        self._to_client.put(data)

    def _server_recv(self) -> dict:
        data = self._to_server.get()
        if data is self._CLOSE:
            raise EOFError("channel closed")
        return wire.read_frame(io.BytesIO(data))

    def _server_close(self) -> None:
        self._to_client.put(self._CLOSE)


#: In-host channel registry: endpoint id -> server instance.
_LOCAL_SERVERS: dict[str, "GlobalStateServer"] = {}
_LOCAL_REG_LOCK = threading.Lock()


def open_channel(endpoint: str):
    """Connect to a server endpoint: ``local:<id>`` or ``host:port``."""
    if endpoint.startswith("local:"):
        with _LOCAL_REG_LOCK:
            server = _LOCAL_SERVERS.get(endpoint[len("local:"):])
        if server is None:
            raise ServerUnavailable(f"no in-host server registered at {endpoint!r}")
        return server.connect_local()
    host, _, port = endpoint.rpartition(":")
    try:
        sock = socket.create_connection((host, int(port)), timeout=30)
    except (OSError, ValueError) as exc:
        raise ServerUnavailable(f"cannot reach {endpoint!r}: {exc}") from exc
    sock.settimeout(None)
    return TcpChannel(sock)


# -- client -------------------------------------------------------------------

class ServerClient:
    """One worker's session with the state server.

    Tracks the message count and the wall time spent blocked on the channel
    (the report's "socket" bucket).  Request ids increase strictly; the server
    enforces it.
    """

    def __init__(self, worker_id: int, channel) -> None:
        self.worker_id = worker_id
        self._channel = channel
        self._next_id = 0
        self.messages = 0
        self.socket_seconds = 0.0

    def _request(self, kind: str, **fields) -> dict:
        self._next_id += 1
        return wire.request(kind, self.worker_id, self._next_id, **fields)

    def _send(self, msg: dict) -> None:
        t0 = _time.perf_counter()
        self._channel.send(wire.encode_frame(msg))
        self.socket_seconds += _time.perf_counter() - t0
        self.messages += 1

    def _rpc(self, msg: dict) -> dict:
        t0 = _time.perf_counter()
        self._channel.send(wire.encode_frame(msg))
        self.messages += 1
        resp = self._channel.recv()
        self.socket_seconds += _time.perf_counter() - t0
        if not resp.get("ok"):
            raise ProtocolError(f"server error for {msg.get('kind')}: "
                                f"{resp.get('error')!r}"
                                + (f" at index {resp['index']}" if "index" in resp else ""))
        return resp

    # silent kinds -----------------------------------------------------------

    def send_silent(self, body: dict) -> None:
        if body["kind"] not in wire.SILENT_KINDS:
            raise ProtocolError(f"{body['kind']} is not a silent kind")
        self._send(body)

    def make_set(self, keys: list[str], amps: np.ndarray, *,
                 reclaim: bool) -> dict:
        return self._request(wire.KIND_SET, keys=list(keys),
                             amps=wire.encode_amps(amps), reclaim=reclaim)

    def make_transfer_in(self, keys: tuple[str, ...], amps: np.ndarray,
                         sha: str | None = None) -> dict:
        body = self._request(wire.KIND_TRANSFER_IN, keys=list(keys),
                             amps=wire.encode_amps(amps))
        if sha is not None:
            body["sha"] = sha
        return body

    def batch(self, bodies: list[dict]) -> None:
        self._rpc(self._request(wire.KIND_BATCH, bodies=bodies))

    # response-bearing kinds ---------------------------------------------------

    def get(self, key: str) -> Ket:
        resp = self._rpc(self._request(wire.KIND_GET, key=key))
        return Ket(tuple(resp["keys"]), wire.decode_amps(resp["amps"]))

    def run(self, circuit: Circuit, keys: list[str], prob_sample: float | None,
            reclaim_measured: bool, test_delay_ms: float = 0.0
            ) -> tuple[str | None, dict[str, np.ndarray], list[str]]:
        msg = self._request(wire.KIND_RUN, circuit=circuit.as_dict(),
                            keys=list(keys), prob_sample=prob_sample,
                            reclaim_measured=reclaim_measured)
        if test_delay_ms:
            msg["test_delay_ms"] = test_delay_ms
        resp = self._rpc(msg)
        released = {k: wire.decode_amps(a) for k, a in resp["released"].items()}
        return resp["outcome"], released, list(resp["residual_keys"])

    def sync(self, audit: dict | None = None) -> int:
        msg = self._request(wire.KIND_SYNC)
        if audit is not None:
            msg["audit"] = audit
        resp = self._rpc(msg)
        return int(resp.get("violations", 0))

    def terminate(self) -> dict:
        resp = self._rpc(self._request(wire.KIND_TERMINATE))
        return resp.get("stats", {})

    def close(self) -> None:
        self._channel.close()


# -- server -------------------------------------------------------------------

class GlobalStateServer:
    """Registry of server-owned kets plus the lock table and sessions."""

    def __init__(self, *, debug: bool = False, memo_capacity: int = 1024,
                 audit_workers: int | None = None) -> None:
        self.debug = debug
        self.audit_workers = audit_workers
        self.memo = UnitaryMemo(memo_capacity)
        self._records: dict[str, Ket] = {}
        # Maintained alongside _records so per-round audits need no rescan.
        self._registry_xor = 0
        self._locks: dict[str, threading.Lock] = {}
        self._meta = threading.Lock()
        self._last_id: dict[int, int] = {}
        self._sync_round: dict[int, int] = {}
        self._audit_pending: dict[int, dict] = {}
        self._violations: list[str] = []
        # Debug only: state-mutating requests in serialization order (the
        # order their closure-lock regions completed).  Replaying the log on
        # a fresh instance must rebuild the registry exactly.
        self.oplog: list[dict] = []
        self._stats_lock = threading.Lock()
        self.stats = {"requests": {}, "batched_bodies": 0, "lock_retries": 0,
                      "sessions": 0}
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._local_sessions: list[LocalChannel] = []
        self._stopping = threading.Event()
        self._local_id: str | None = None
        # Test hook: called after a closure snapshot, before locking.
        self._after_snapshot: Callable[[], None] | None = None

    # -- lifecycle -------------------------------------------------------------

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        try:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((host, port))
            listener.listen(64)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._listener = listener
        thread = threading.Thread(target=self._accept_loop, daemon=True,
                                  name="state-server-accept")
        thread.start()
        self._threads.append(thread)
        return listener.getsockname()

    def register_local(self, channel_id: str) -> str:
        with _LOCAL_REG_LOCK:
            if channel_id in _LOCAL_SERVERS:
                raise BindFailure(f"in-host endpoint {channel_id!r} already registered")
            _LOCAL_SERVERS[channel_id] = self
        self._local_id = channel_id
        return f"local:{channel_id}"

    def connect_local(self) -> LocalChannel:
        channel = LocalChannel()
        self._local_sessions.append(channel)
        thread = threading.Thread(
            target=self._session, args=(channel._server_recv, channel._server_send),
            daemon=True, name="state-server-session")
        thread.start()
        self._threads.append(thread)
        return channel

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for channel in self._local_sessions:
            channel._server_close()
        if self._local_id is not None:
            with _LOCAL_REG_LOCK:
                _LOCAL_SERVERS.pop(self._local_id, None)
            self._local_id = None

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            channel = TcpChannel(conn)
            thread = threading.Thread(
                target=self._session, args=(channel.recv, channel.send),
                daemon=True, name="state-server-session")
            thread.start()
            self._threads.append(thread)

    # -- session loop ------------------------------------------------------------

    def _session(self, recv, send) -> None:
        with self._stats_lock:
            self.stats["sessions"] += 1
        while not self._stopping.is_set():
            try:
                msg = recv()
            except (EOFError, OSError, wire.WireError):
                return
            try:
                reply = self._dispatch(msg)
            except ProtocolError as exc:
                send(wire.encode_frame(wire.error_response(msg.get("id", 0), str(exc))))
                return
            if reply is not None:
                try:
                    send(wire.encode_frame(reply))
                except (OSError, ValueError):
                    return
            if msg.get("kind") == wire.KIND_TERMINATE:
                self.stop()
                return

    def _dispatch(self, msg: dict) -> dict | None:
        kind = msg.get("kind")
        worker = msg.get("worker")
        req_id = msg.get("id")
        if kind not in wire.ALL_KINDS:
            raise ProtocolError(f"unknown message kind {kind!r}")
        if not isinstance(worker, int) or not isinstance(req_id, int):
            raise ProtocolError("missing worker or id")
        with self._meta:
            last = self._last_id.get(worker, 0)
            if req_id <= last:
                raise ProtocolError(
                    f"request id {req_id} from worker {worker} not increasing "
                    f"(last {last})")
            self._last_id[worker] = req_id
        with self._stats_lock:
            counts = self.stats["requests"]
            counts[kind] = counts.get(kind, 0) + 1

        if kind == wire.KIND_BATCH:
            return self._handle_batch(msg)
        if kind in wire.SILENT_KINDS:
            error = self._apply_silent(msg)
            if error is not None:
                raise ProtocolError(error)
            return None
        if kind == wire.KIND_GET:
            return self._handle_get(msg)
        if kind == wire.KIND_RUN:
            return self._handle_run(msg)
        if kind == wire.KIND_SYNC:
            return self._handle_sync(msg)
        if kind == wire.KIND_TERMINATE:
            return wire.response(msg["id"], stats=self.stats_snapshot())
        raise ProtocolError(f"unhandled kind {kind!r}")

    # -- locking -------------------------------------------------------------------

    def _closure_of(self, keys: list[str]) -> set[str] | None:
        closure: set[str] = set()
        for key in keys:
            ket = self._records.get(key)
            if ket is None:
                return None
            closure.update(ket.keys)
        return closure

    def _lock_closure(self, keys: list[str]) -> list[str]:
        """Lock the entanglement closure of ``keys``; returns the locked keys.

        Acquisition is in ascending key order.  If the closure grew between
        the snapshot and the acquisition (a concurrent operation merged a
        state in), everything is released and the snapshot retried.
        """
        for _ in range(CLOSURE_RETRY_LIMIT):
            with self._meta:
                closure = self._closure_of(keys)
                if closure is None:
                    raise ProtocolError(f"no server state for one of {keys}")
                ordered = sorted(closure)
                locks = [self._locks.setdefault(k, threading.Lock())
                         for k in ordered]
            if self._after_snapshot is not None:
                self._after_snapshot()
            for lock in locks:
                lock.acquire()
            with self._meta:
                current = self._closure_of(keys)
            if current is not None and current == closure:
                return ordered
            for lock in locks:
                lock.release()
            if current is None:
                raise ProtocolError(f"state for {keys} vanished while locking")
            with self._stats_lock:
                self.stats["lock_retries"] += 1
        raise ProtocolError(f"closure of {keys} kept changing; giving up")

    def _unlock(self, ordered: list[str]) -> None:
        for key in ordered:
            lock = self._locks.get(key)
            if lock is not None and lock.locked():
                lock.release()

    # -- registry ---------------------------------------------------------------

    def _record(self, key: str, ket: Ket) -> None:
        """Bind ``key``; caller holds the meta lock."""
        if key not in self._records:
            self._registry_xor ^= _key_hash(key)
        self._records[key] = ket

    def _unrecord(self, key: str) -> None:
        """Drop ``key``; caller holds the meta lock."""
        if self._records.pop(key, None) is not None:
            self._registry_xor ^= _key_hash(key)

    # -- handlers ---------------------------------------------------------------

    def _apply_silent(self, body: dict) -> str | None:
        """Apply a SET or TRANSFER_IN; returns an error string or None."""
        kind = body.get("kind")
        try:
            if kind == wire.KIND_TRANSFER_IN:
                keys = tuple(body["keys"])
                amps = wire.decode_amps(body["amps"])
                ket = Ket(keys, amps)
                if self.debug and body.get("sha"):
                    if wire.ket_digest(keys, amps) != body["sha"]:
                        return f"transfer digest mismatch for {keys}"
                with self._meta:
                    for key in keys:
                        if key in self._records:
                            return f"transfer of already-registered key {key!r}"
                    for key in keys:
                        self._record(key, ket)
                    if self.debug:
                        self.oplog.append(body)
                return None
            if kind == wire.KIND_SET:
                return self._apply_set(body)
            return f"kind {kind!r} cannot be applied silently"
        except (KeyError, ValueError, wire.WireError) as exc:
            return f"malformed {kind} body: {exc}"

    def _apply_set(self, body: dict) -> str | None:
        keys = list(body["keys"])
        amps = wire.decode_amps(body["amps"])
        reclaim = bool(body.get("reclaim", True))
        known = [k for k in keys if k in self._records]
        if not known and reclaim:
            return f"reclaim of keys the server never held: {keys}"
        try:
            locked = self._lock_closure(known) if known else []
        except ProtocolError as exc:
            return str(exc)
        try:
            with self._meta:
                # Partners of destroyed states (outside the set keys) drop
                # to fresh |0>, staying server-side.
                partners: set[str] = set()
                for key in keys:
                    ket = self._records.get(key)
                    if ket is not None:
                        partners.update(ket.keys)
                partners -= set(keys)
                for key in partners:
                    self._record(key, Ket(
                        (key,), np.array([1.0, 0.0], dtype=complex)))
                if reclaim:
                    for key in keys:
                        self._unrecord(key)
                else:
                    ket = Ket(tuple(keys), amps)
                    for key in keys:
                        self._record(key, ket)
                if self.debug:
                    self.oplog.append(body)
            return None
        finally:
            self._unlock(locked)

    def _handle_get(self, msg: dict) -> dict:
        key = msg.get("key")
        if not isinstance(key, str):
            raise ProtocolError("GET needs a key")
        locked = self._lock_closure([key])
        try:
            with self._meta:
                ket = self._records[key]
                return wire.response(msg["id"], keys=list(ket.keys),
                                     amps=wire.encode_amps(ket.amps))
        finally:
            self._unlock(locked)

    def _handle_run(self, msg: dict) -> dict:
        try:
            circuit = Circuit.from_dict(msg["circuit"])
            keys = list(msg["keys"])
            prob_sample = msg.get("prob_sample")
            reclaim = bool(msg.get("reclaim_measured", True))
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"malformed RUN: {exc}") from exc
        locked = self._lock_closure(keys)
        try:
            if self.debug and msg.get("test_delay_ms"):
                _time.sleep(float(msg["test_delay_ms"]) / 1000.0)
            with self._meta:
                states = []
                seen: set[int] = set()
                for key in locked:
                    ket = self._records[key]
                    if id(ket) not in seen:
                        seen.add(id(ket))
                        states.append(ket)
            try:
                outcome, new_states = apply(states, circuit, keys,
                                            prob_sample, self.memo)
            except (ValueError, KeyError) as exc:
                raise ProtocolError(f"RUN failed: {exc}") from exc
            measured_keys = [keys[w] for w in circuit.measured]
            released: dict[str, list] = {}
            residual_keys: list[str] = []
            with self._meta:
                for state in new_states:
                    is_measured_single = (len(state.keys) == 1
                                          and state.keys[0] in measured_keys)
                    if is_measured_single and reclaim:
                        released[state.keys[0]] = wire.encode_amps(state.amps)
                        self._unrecord(state.keys[0])
                    else:
                        if not is_measured_single:
                            residual_keys.extend(state.keys)
                        for key in state.keys:
                            self._record(key, state)
                if self.debug:
                    self.oplog.append(msg)
            return wire.response(msg["id"], outcome=outcome, released=released,
                                 residual_keys=residual_keys)
        finally:
            self._unlock(locked)

    def _handle_batch(self, msg: dict) -> dict:
        bodies = msg.get("bodies")
        if not isinstance(bodies, list):
            raise ProtocolError("BATCH needs a body list")
        with self._stats_lock:
            self.stats["batched_bodies"] += len(bodies)
        for index, body in enumerate(bodies):
            kind = body.get("kind") if isinstance(body, dict) else None
            if kind not in wire.SILENT_KINDS:
                return wire.error_response(
                    msg["id"], f"kind {kind!r} not allowed in a batch",
                    index=index)
            error = self._apply_silent(body)
            if error is not None:
                return wire.error_response(msg["id"], error, index=index)
        return wire.response(msg["id"])

    def _handle_sync(self, msg: dict) -> dict:
        worker = msg["worker"]
        with self._meta:
            self._sync_round[worker] = self._sync_round.get(worker, 0) + 1
            if self.debug and "audit" in msg:
                self._audit_pending[worker] = {
                    "round": self._sync_round[worker],
                    "audit": msg["audit"],
                }
                self._maybe_audit()
            violations = len(self._violations)
        return wire.response(msg["id"], violations=violations)

    def _maybe_audit(self) -> None:
        """Cross-check reported GLOBAL key sets once all workers reach a round.

        Caller holds the meta lock.  Workers advance in lockstep (window
        barrier), so equal round numbers describe the same quiescent point.
        Every registered key must be claimed by exactly one worker; the
        order-insensitive XOR digest plus the total count verifies that
        without shipping full key lists.

        ``audit_workers`` pins the cohort size.  Without it the first round
        is skipped: until every worker has synced once, the server cannot
        tell a complete cohort from an early-arriving subset, and a partial
        comparison would misreport keys the missing workers hold.
        """
        if not self._audit_pending:
            return
        rounds = {info["round"] for info in self._audit_pending.values()}
        workers = set(self._audit_pending)
        if len(rounds) != 1:
            return
        if self.audit_workers is not None:
            if len(workers) < self.audit_workers:
                return
        elif min(rounds) == 1 or workers != set(self._sync_round):
            return
        combined = 0
        claimed = 0
        for info in self._audit_pending.values():
            combined ^= int(info["audit"].get("xor", "0"), 16)
            claimed += int(info["audit"].get("count", 0))
        if claimed != len(self._records) or combined != self._registry_xor:
            self._violations.append(
                f"round {min(rounds)}: workers claim {claimed} global keys "
                f"(xor {combined:032x}), server holds {len(self._records)} "
                f"(xor {self._registry_xor:032x})")
        self._audit_pending.clear()

    # -- inspection -----------------------------------------------------------

    def stats_snapshot(self) -> dict:
        with self._stats_lock:
            snap = {"requests": dict(self.stats["requests"]),
                    "batched_bodies": self.stats["batched_bodies"],
                    "lock_retries": self.stats["lock_retries"],
                    "sessions": self.stats["sessions"]}
        with self._meta:
            snap["keys"] = len(self._records)
            snap["violations"] = len(self._violations)
            snap["violation_samples"] = self._violations[:10]
        return snap

    def registry_snapshot(self) -> dict[str, tuple[tuple[str, ...], tuple[complex, ...]]]:
        """Key -> (ket keys, amplitudes); for tests and the serial oracle."""
        with self._meta:
            return {key: (ket.keys, tuple(ket.amps))
                    for key, ket in self._records.items()}


def _key_hash(key: str) -> int:
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:16], "big")


def global_key_audit(keys: list[str]) -> dict:
    """Order-insensitive digest of a key set: count + XOR of per-key hashes.

    XOR digests from disjoint sets combine by XOR, so the server can verify
    exactly-once ownership across workers without full key lists.
    """
    combined = 0
    for key in keys:
        combined ^= _key_hash(key)
    return {"count": len(keys), "xor": f"{combined:032x}"}


def replay_oplog(oplog: list[dict]) -> GlobalStateServer:
    """Apply a debug operation log serially on a fresh instance.

    The log order is the serialization order the live server committed to,
    so the rebuilt registry must match the live one bit for bit.
    """
    fresh = GlobalStateServer(debug=False)
    for msg in oplog:
        kind = msg.get("kind")
        if kind in wire.SILENT_KINDS:
            error = fresh._apply_silent(msg)
            if error is not None:
                raise ProtocolError(f"replay of {kind} failed: {error}")
        elif kind == wire.KIND_RUN:
            fresh._handle_run(msg)
        else:
            raise ProtocolError(f"unexpected kind {kind!r} in the log")
    return fresh
