"""Worker-local quantum state manager.

Every qubit key a worker knows about carries an ownership tag.  LOCAL keys
live here, in ``_kets``; GLOBAL keys live on the state server and only the
tag is kept.  Operations on purely local keys never leave the worker.  An
operation touching any GLOBAL key is forwarded, after pushing whatever local
states it also involves (a state must be in one place to be acted on).

Ownership flips are cheap in the hot direction: measurement results and
explicit sets pull keys back to LOCAL, with the server notified through
buffered silent requests that ride along on the next flush.  Disabling
offloading turns reclamation off, so a key that was ever transferred stays
GLOBAL and every later touch forwards; the request counters make that
behavior visible.
"""

from __future__ import annotations

import hashlib
import uuid

import numpy as np

from . import wire
from .quantum import Circuit, Ket, UnitaryMemo, apply
from .server import ServerClient, global_key_audit

LOCAL = "local"
GLOBAL = "global"

_ZERO = np.array([1.0, 0.0], dtype=complex)


class UnknownKey(KeyError):
    """Operation on a key this worker has never seen (or already dropped)."""


class LocalStateManager:
    def __init__(self, worker_id: int, client: ServerClient | None = None, *,
                 batching: bool = True, offload: bool = True,
                 debug: bool = False, run_seed: int = 0,
                 memo_capacity: int = 1024) -> None:
        self.worker_id = worker_id
        self.client = client
        self.batching = batching
        self.offload = offload
        self.debug = debug
        self.run_seed = run_seed
        self.memo = UnitaryMemo(memo_capacity)
        self._tags: dict[str, str] = {}
        self._kets: dict[str, Ket] = {}
        self._pending: list[dict] = []
        # Keys shipped to another worker by reference: reported as ours for
        # one final barrier (the receiver claims them next round), then
        # forgotten.
        self._handover: set[str] = set()
        self._ever_transferred: set[str] = set()
        self._unfenced = False
        self._key_counts: dict[str, int] = {}
        self.local_requests = 0
        self.forwarded_requests = 0
        self.touch_transferred = 0
        self.touch_transferred_local = 0

    # -- keys -------------------------------------------------------------

    def new_key(self, entity: str) -> str:
        """Deterministic fresh key for a qubit created by ``entity``."""
        count = self._key_counts.get(entity, 0)
        self._key_counts[entity] = count + 1
        digest = hashlib.sha256(
            f"{self.run_seed}:{entity}:{count}".encode()).digest()
        return str(uuid.UUID(bytes=digest[:16], version=4))

    def tag(self, key: str) -> str:
        try:
            return self._tags[key]
        except KeyError:
            raise UnknownKey(key) from None

    # -- internal bookkeeping ----------------------------------------------

    def _bind(self, ket: Ket) -> None:
        for key in ket.keys:
            self._tags[key] = LOCAL
            self._kets[key] = ket

    def _unbind(self, keys: tuple[str, ...]) -> None:
        for key in keys:
            self._kets.pop(key, None)

    def _release_partners(self, parent: Ket, removed: set[str]) -> None:
        # Keys of a destroyed state that were not re-set drop to fresh |0>.
        for key in parent.keys:
            if key not in removed:
                self._bind(Ket((key,), _ZERO.copy()))

    def _push_local_ket(self, ket: Ket) -> None:
        assert self.client is not None
        sha = wire.ket_digest(ket.keys, ket.amps) if self.debug else None
        self._pending.append(self.client.make_transfer_in(
            ket.keys, ket.amps, sha))
        self._unbind(ket.keys)
        for key in ket.keys:
            self._tags[key] = GLOBAL
            self._ever_transferred.add(key)

    def _count(self, keys, *, local: bool, touches: bool) -> None:
        if local:
            self.local_requests += 1
        else:
            self.forwarded_requests += 1
        if touches:
            self.touch_transferred += 1
            if local:
                self.touch_transferred_local += 1

    def _touches_transferred(self, keys) -> bool:
        return any(k in self._ever_transferred for k in keys)

    # -- the three state requests ---------------------------------------------

    def set(self, keys: list[str], amps: np.ndarray) -> None:
        """(Re)initialize ``keys`` as one joint state with ``amps``.

        Old states containing any of the keys are destroyed; their other
        keys drop to |0>.  With offloading on this always ends LOCAL, the
        server learning of reclaimed keys through a buffered request.
        """
        touches = self._touches_transferred(keys)
        global_keys = [k for k in keys if self._tags.get(k) == GLOBAL]
        if global_keys and self.client is None:
            raise UnknownKey(f"GLOBAL key without a server session: {global_keys[0]}")

        if not self.offload and global_keys:
            # Forwarded set: the new joint state lives server-side.  Local
            # member states move there implicitly (the server rebinds), so
            # drop their bindings and release untouched partners here.
            removed = set(keys)
            for key in keys:
                if self._tags.get(key) == LOCAL:
                    parent = self._kets.get(key)
                    if parent is not None:
                        self._unbind(parent.keys)
                        self._release_partners(parent, removed)
                        self._unbind((key,))
                self._tags[key] = GLOBAL
                self._ever_transferred.add(key)
            self._pending.append(self.client.make_set(
                keys, np.asarray(amps, dtype=complex), reclaim=False))
            self._count(keys, local=False, touches=touches)
            return

        removed = set(keys)
        reclaimed: list[str] = []
        for key in keys:
            tag = self._tags.get(key)
            if tag == GLOBAL:
                reclaimed.append(key)
            elif tag == LOCAL:
                parent = self._kets.get(key)
                if parent is not None:
                    self._unbind(parent.keys)
                    self._release_partners(parent, removed)
        if reclaimed:
            self._pending.append(self.client.make_set(
                reclaimed, np.zeros(0, dtype=complex), reclaim=True))
        self._bind(Ket(tuple(keys), np.asarray(amps, dtype=complex)))
        self._count(keys, local=True, touches=touches)

    def get(self, key: str) -> Ket:
        """Snapshot of the joint state containing ``key``."""
        tag = self.tag(key)
        touches = self._touches_transferred([key])
        if tag == LOCAL:
            ket = self._kets[key]
            self._count([key], local=True, touches=touches)
            return Ket(ket.keys, ket.amps.copy())
        assert self.client is not None
        self.flush()
        snapshot = self.client.get(key)
        self._count([key], local=False, touches=touches)
        return snapshot

    def run(self, circuit: Circuit, keys: list[str],
            prob_sample: float | None = None) -> str | None:
        """Apply ``circuit`` to ``keys``; returns measured bits, if any."""
        touches = self._touches_transferred(keys)
        tags = [self.tag(k) for k in keys]
        if all(t == LOCAL for t in tags):
            states = []
            seen: set[int] = set()
            for key in keys:
                ket = self._kets[key]
                if id(ket) not in seen:
                    seen.add(id(ket))
                    states.append(ket)
            outcome, new_states = apply(states, circuit, keys, prob_sample,
                                        self.memo)
            for state in states:
                self._unbind(state.keys)
            for state in new_states:
                self._bind(state)
            self._count(keys, local=True, touches=touches)
            return outcome

        assert self.client is not None
        for key in keys:
            if self._tags[key] == LOCAL:
                ket = self._kets.get(key)
                if ket is not None:
                    self._push_local_ket(ket)
        self.flush()
        outcome, released, _residual = self.client.run(
            circuit, keys, prob_sample, reclaim_measured=self.offload)
        for key, amps in released.items():
            self._bind(Ket((key,), amps))
        self._count(keys, local=False, touches=touches)
        return outcome

    # -- moving qubits between workers --------------------------------------------

    def transfer_out(self, key: str, dest_worker: int) -> dict:
        """Detach ``key`` for shipment inside an event payload."""
        tag = self.tag(key)
        if dest_worker == self.worker_id:
            return {"mode": "keep", "key": key}
        if tag == GLOBAL:
            self._handover.add(key)
            return {"mode": "ref", "key": key}
        ket = self._kets[key]
        if len(ket.keys) == 1:
            # Unentangled qubits travel by value; nothing stays behind.
            amps = wire.encode_amps(ket.amps)
            self._unbind(ket.keys)
            del self._tags[key]
            return {"mode": "value", "key": key, "amps": amps}
        if self.client is None:
            raise UnknownKey(f"cannot ship entangled key {key} without a server")
        self._push_local_ket(ket)
        self._handover.add(key)
        return {"mode": "ref", "key": key}

    def receive_transfer(self, payload: dict) -> str:
        key = payload["key"]
        mode = payload["mode"]
        if mode == "keep":
            self.tag(key)
        elif mode == "value":
            self._bind(Ket((key,), wire.decode_amps(payload["amps"])))
        elif mode == "ref":
            self._tags[key] = GLOBAL
            self._ever_transferred.add(key)
        else:
            raise ValueError(f"unknown transfer mode {mode!r}")
        return key

    def discard(self, key: str) -> None:
        """Forget a spent qubit (a measured photon, typically)."""
        tag = self._tags.get(key)
        if tag == LOCAL:
            ket = self._kets.get(key)
            if ket is not None:
                if len(ket.keys) > 1:
                    raise ValueError(f"refusing to discard entangled key {key}")
                self._unbind(ket.keys)
            del self._tags[key]
        elif tag == GLOBAL and self.offload:
            # Reclaimed-then-discarded elsewhere; without offloading the key
            # just stays parked server-side.
            del self._tags[key]
            self._pending.append(self.client.make_set(
                [key], np.zeros(0, dtype=complex), reclaim=True))
        elif tag is None:
            raise UnknownKey(key)

    # -- server coordination -----------------------------------------------------

    def flush(self) -> None:
        """Send buffered silent requests: one BATCH frame, or one frame each."""
        if not self._pending or self.client is None:
            self._pending.clear()
            return
        bodies, self._pending = self._pending, []
        if self.batching:
            self.client.batch(bodies)
        else:
            for body in bodies:
                self.client.send_silent(body)
            self._unfenced = True

    def sync_barrier(self) -> int:
        """Flush and fence with the server at a window boundary.

        The sync round trip is only paid when something requires it: the
        per-window audit in debug mode, or unacknowledged one-way frames
        (batching off) whose application the next window must not outrun.
        A batch is itself acknowledged, so batched traffic is already
        fenced when flush returns.

        Keys handed to another worker are still reported this one time;
        their tags are dropped right after, and the receiver reports them
        from the next barrier on (it claims them before its own next sync).
        """
        self.flush()
        if self.client is None:
            return 0
        violations = 0
        if self.debug:
            audit = global_key_audit(
                [k for k, t in self._tags.items() if t == GLOBAL])
            violations = self.client.sync(audit)
            self._unfenced = False
        elif self._unfenced:
            self.client.sync(None)
            self._unfenced = False
        for key in self._handover:
            self._tags.pop(key, None)
        self._handover.clear()
        return violations

    # -- introspection ----------------------------------------------------------

    def audit(self) -> list[str]:
        """Ownership hygiene walk; returns violation descriptions."""
        problems: list[str] = []
        for key, tag in self._tags.items():
            bound = key in self._kets
            if tag == LOCAL and not bound:
                problems.append(f"LOCAL key {key} has no state")
            if tag == GLOBAL and bound:
                problems.append(f"GLOBAL key {key} still bound locally")
        for key, ket in self._kets.items():
            if key not in ket.keys:
                problems.append(f"binding {key} -> state without that key")
            for member in ket.keys:
                if self._kets.get(member) is not ket:
                    problems.append(
                        f"state of {key} not shared by its member {member}")
                if self._tags.get(member) != LOCAL:
                    problems.append(
                        f"member {member} of a local state not tagged LOCAL")
        return problems

    @property
    def counters(self) -> dict[str, int]:
        return {"local": self.local_requests,
                "forwarded": self.forwarded_requests,
                "touch_transferred": self.touch_transferred,
                "touch_transferred_local": self.touch_transferred_local}

    @property
    def bound_keys(self) -> int:
        return len(self._kets)
