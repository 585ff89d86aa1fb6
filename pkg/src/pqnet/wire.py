"""Wire format shared by the state-server protocol and the socket transport.

Frames are a 4-byte big-endian length prefix followed by one UTF-8 JSON
object.  Every frame carries ``"v": 1``; a peer that sees any other version
must refuse the stream.  JSON numbers round-trip Python ints and floats
exactly (floats are emitted as shortest-repr), so timestamps and amplitudes
survive the wire bit-for-bit.  Complex amplitudes travel as [re, im] pairs.

Both transports and both server channel flavors (TCP and in-host) move the
same encoded records; nothing is ever passed by object reference across a
worker boundary, which is what keeps thread-backed and process-backed runs
byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from typing import Any, BinaryIO

import numpy as np

from .kernel import Event

PROTOCOL_VERSION = 1

_LEN = struct.Struct("!I")
MAX_FRAME = 64 * 1024 * 1024


class WireError(RuntimeError):
    """Malformed frame, wrong version, or a violated protocol rule."""


def dumps(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


def encode_frame(obj: dict) -> bytes:
    body = dumps(obj)
    if len(body) > MAX_FRAME:
        raise WireError(f"frame of {len(body)} bytes exceeds limit")
    return _LEN.pack(len(body)) + body


def write_frame(stream: BinaryIO, obj: dict) -> int:
    data = encode_frame(obj)
    stream.write(data)
    stream.flush()
    return len(data)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise EOFError("stream closed mid-frame" if chunks or got else "stream closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> dict:
    (length,) = _LEN.unpack(_read_exact(stream, _LEN.size))
    if length > MAX_FRAME:
        raise WireError(f"declared frame length {length} exceeds limit")
    try:
        obj = json.loads(_read_exact(stream, length).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"undecodable frame: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("frame body must be a JSON object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise WireError(f"unsupported protocol version {obj.get('v')!r}")
    return obj


def read_frame_bytes(data: bytes) -> dict:
    return read_frame(io.BytesIO(data))


# -- amplitude codec ---------------------------------------------------------

def encode_amps(amps: np.ndarray) -> list[list[float]]:
    return [[float(a.real), float(a.imag)] for a in np.asarray(amps)]


def decode_amps(pairs: list) -> np.ndarray:
    try:
        return np.array([complex(re, im) for re, im in pairs], dtype=complex)
    except (TypeError, ValueError) as exc:
        raise WireError(f"bad amplitude encoding: {exc}") from exc


def ket_digest(keys: tuple[str, ...], amps: np.ndarray) -> str:
    """Canonical digest of a ket, for debug consistency checks on forwards."""
    body = json.dumps([list(keys), encode_amps(amps)], separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


# -- event records ------------------------------------------------------------

def event_to_record(event: Event) -> dict:
    return {"t": event.time, "s": event.source, "n": event.seq,
            "g": event.target, "h": event.handler, "p": event.payload,
            "w": event.dest_worker}


def event_from_record(rec: dict) -> Event:
    try:
        return Event(rec["t"], rec["s"], rec["n"], rec["g"], rec["h"],
                     rec["p"], rec["w"])
    except KeyError as exc:
        raise WireError(f"event record missing field {exc}") from exc


def encode_exchange(worker: int, local_min: int, events: list[Event],
                    dup_factor: int = 0) -> tuple[dict, int, int]:
    """Bundle one worker-to-worker window exchange.

    Each record is appended once plus ``dup_factor`` duplicate copies (a
    load diagnostic; receivers drop the extras).  Returns the frame object,
    the serialized size of the genuine records, and of the duplicates, so
    callers can account bytes exactly.
    """
    records = []
    base_bytes = 0
    dup_bytes = 0
    for event in events:
        rec = event_to_record(event)
        size = len(dumps(rec))
        records.append(rec)
        base_bytes += size
        for _ in range(dup_factor):
            records.append(rec)
            dup_bytes += size
    frame = {"v": PROTOCOL_VERSION, "worker": worker, "min": local_min,
             "records": records}
    return frame, base_bytes, dup_bytes


def decode_exchange(frame: dict) -> tuple[int, int, list[Event]]:
    """Unpack an exchange frame, dropping exact-duplicate records."""
    if frame.get("v") != PROTOCOL_VERSION:
        raise WireError(f"unsupported protocol version {frame.get('v')!r}")
    try:
        worker = frame["worker"]
        local_min = frame["min"]
        records = frame["records"]
    except KeyError as exc:
        raise WireError(f"exchange frame missing field {exc}") from exc
    events = []
    seen: set[tuple[str, int]] = set()
    for rec in records:
        ident = (rec["s"], rec["n"])
        if ident in seen:
            continue
        seen.add(ident)
        events.append(event_from_record(rec))
    return worker, local_min, events


# -- state-server messages -----------------------------------------------------

KIND_SET = "SET"
KIND_GET = "GET"
KIND_RUN = "RUN"
KIND_TRANSFER_IN = "TRANSFER_IN"
KIND_SYNC = "SYNC"
KIND_TERMINATE = "TERMINATE"
KIND_BATCH = "BATCH"

#: Kinds that expect no individual response and may ride inside a BATCH.
SILENT_KINDS = frozenset({KIND_SET, KIND_TRANSFER_IN})
RESPONSE_KINDS = frozenset({KIND_GET, KIND_RUN, KIND_SYNC, KIND_TERMINATE,
                            KIND_BATCH})
ALL_KINDS = SILENT_KINDS | RESPONSE_KINDS


def request(kind: str, worker: int, req_id: int, **fields: Any) -> dict:
    msg = {"v": PROTOCOL_VERSION, "kind": kind, "worker": worker, "id": req_id}
    msg.update(fields)
    return msg


def response(req_id: int, **fields: Any) -> dict:
    msg = {"v": PROTOCOL_VERSION, "re": req_id, "ok": True}
    msg.update(fields)
    return msg


def error_response(req_id: int, message: str, **fields: Any) -> dict:
    msg = {"v": PROTOCOL_VERSION, "re": req_id, "ok": False, "error": message}
    msg.update(fields)
    return msg
