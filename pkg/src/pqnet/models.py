"""Hardware models and the entanglement-distribution protocol stack.

The moving parts, bottom to top:

* ``HardwareParams``: every physical constant, with the package defaults.
* ``plan_network``: turns (spec, flows, partition, params) into a static
  ``NetworkPlan`` — memory pair assignments, TDM slots, swap duties, the
  declared cross-traffic links, and the generation round period.  The plan is
  a pure function of its inputs, so every worker (and the sequential oracle
  run) derives the identical plan independently.
* ``Router`` and ``BsmNode``: the event-handling entities.  Memories attempt
  photon emission on a shared absolute round grid; a midpoint node heralds
  coincidences back to both routers; routers swap designated segments and
  record deliveries at the flow source.

Determinism rules observed throughout: every random draw comes from the
stream of the entity that handles the event (memories draw from their own
streams, midpoint nodes and routers from theirs), all iteration is over
lists in memory-index or plan order, and message payloads carry only
JSON-native values.  Fidelity is classical metadata riding along with the
entanglement bookkeeping, not a property of the stored amplitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sync
from .kernel import LAGGED_LANE, MAIN_LANE, MS, Scheduler
from .quantum import Circuit, bell_amps
from .qsm import LocalStateManager
from .topology import Flow, NetworkSpec, PartitionMap

RAW = "raw"
EMITTING = "emitting"
ENTANGLED = "entangled"

_ZERO = np.array([1.0, 0.0], dtype=complex)

#: Midpoint measurement: CNOT then H on the first wire, read both.
BSM_CIRCUIT = Circuit(2, [("CNOT", (0, 1)), ("H", (0,))], measured=(0, 1))

#: Local purification step: CNOT from the kept onto the sacrificed qubit,
#: read the sacrificed one.
PURIFY_CIRCUIT = Circuit(2, [("CNOT", (0, 1))], measured=(1,))

#: Pauli frame fix applied at the right-hand partner of a Bell measurement,
#: keyed by the two outcome bits.
PAULI_FIX = {"00": (), "01": ("X",), "10": ("Z",), "11": ("X", "Z")}

CORRECTION_CIRCUITS = {
    outcome: Circuit(1, [(g, (0,)) for g in gates])
    for outcome, gates in PAULI_FIX.items() if gates
}


class PlanError(ValueError):
    """The configuration cannot be realized on this network."""


class InsufficientMemories(PlanError):
    """Flow demand exceeds a router's memory count."""


def align_up(value: int, step: int) -> int:
    return -(-value // step) * step


@dataclass(frozen=True)
class HardwareParams:
    """Physical constants; defaults are the package baseline.

    ``bsm_success`` is the intrinsic heralding ceiling of a linear-optics
    Bell measurement, drawn per coincidence.  ``gate_fidelity`` and
    ``dark_count_hz`` are accepted and validated but inert at their
    defaults (perfect gates, no dark counts).
    """

    memory_efficiency: float = 0.75
    memory_frequency_hz: float = 20_000.0
    coherence_time_s: float = 1.3
    raw_fidelity: float = 0.99
    detector_efficiency: float = 0.9
    count_rate_hz: float = 25e6
    dark_count_hz: float = 0.0
    resolution_ps: int = 150
    attenuation_db_per_km: float = 0.2
    light_speed_m_per_s: float = 2e8
    tdm_frame_ps: int = 12_500
    gate_fidelity: float = 1.0
    swap_success: float = 1.0
    bsm_success: float = 0.5
    qc_length_km: float = 1.0
    cc_latency_ms: float = 0.3

    def validate(self) -> None:
        for name in ("memory_efficiency", "raw_fidelity", "detector_efficiency",
                     "gate_fidelity", "swap_success", "bsm_success"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise PlanError(f"{name} must be in [0, 1], got {value}")
        for name in ("memory_frequency_hz", "coherence_time_s", "count_rate_hz",
                     "light_speed_m_per_s", "qc_length_km", "cc_latency_ms"):
            value = getattr(self, name)
            if value <= 0:
                raise PlanError(f"{name} must be positive, got {value}")
        for name in ("resolution_ps", "tdm_frame_ps"):
            if getattr(self, name) <= 0:
                raise PlanError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dark_count_hz < 0 or self.attenuation_db_per_km < 0:
            raise PlanError("dark count and attenuation cannot be negative")

    # -- derived quantities, all integer picoseconds -------------------------

    @property
    def cc_latency_ps(self) -> int:
        return round(self.cc_latency_ms * MS)

    @property
    def memory_period_ps(self) -> int:
        return round(1e12 / self.memory_frequency_hz)

    @property
    def coherence_ps(self) -> int:
        return round(self.coherence_time_s * 1e12)

    @property
    def dead_time_ps(self) -> int:
        return round(1e12 / self.count_rate_hz)

    @property
    def slot_spacing_ps(self) -> int:
        # Multiplexed pairs are spaced by whole TDM frames, enough of them
        # that consecutive clicks clear the detector dead time.
        return align_up(max(self.tdm_frame_ps, self.dead_time_ps),
                        self.tdm_frame_ps)

    def qc_delay_ps(self, length_km: float) -> int:
        return round(length_km * 1000.0 / self.light_speed_m_per_s * 1e12)

    def survival(self, length_km: float) -> float:
        return 10.0 ** (-self.attenuation_db_per_km * length_km / 10.0)


# -- static planning ----------------------------------------------------------


@dataclass(frozen=True)
class PlannedMemory:
    """One memory's generation duty, fixed for the whole run."""

    mem_id: str
    router: str
    index: int
    flow_id: int
    link_id: int
    side: str  # "L" if this router is the link's lower-index end
    slot: int
    bsm: str
    partner_router: str
    partner_mem: str


@dataclass(frozen=True)
class SwapDuty:
    flow_id: int
    left_end: str
    right_end: str


@dataclass(frozen=True)
class EndpointRole:
    flow_id: int
    other_end: str
    is_source: bool


@dataclass
class NetworkPlan:
    spec: NetworkSpec
    flows: list[Flow]
    pmap: PartitionMap
    params: HardwareParams
    worker_of: dict[str, int]
    bsm_names: list[str]
    bsm_links: dict[str, tuple[str, str, float]]  # name -> (left, right, length)
    links: list[sync.Link]
    lagged: set[str]
    memories: dict[str, list[PlannedMemory]]
    swap_duties: dict[str, list[SwapDuty]]
    endpoint_roles: dict[str, list[EndpointRole]]
    round_period_ps: int
    cc_ps: int

    @property
    def routers(self) -> list[str]:
        return self.spec.routers


def _segment_duties(path: tuple[str, ...], flow_id: int,
                    out: dict[str, list[SwapDuty]]) -> None:
    # Recursive bisection: every interior router is the designated swapper
    # of exactly one (left, right) segment, so its trigger condition is
    # purely local: hold pairs toward both of its segment ends.
    stack = [(0, len(path) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i <= 1:
            continue
        mid = (i + j) // 2
        out.setdefault(path[mid], []).append(
            SwapDuty(flow_id, path[i], path[j]))
        stack.append((mid, j))
        stack.append((i, mid))


def plan_network(spec: NetworkSpec, flows: list[Flow], pmap: PartitionMap,
                 params: HardwareParams) -> NetworkPlan:
    """Derive every static decision of a run; raises on impossible configs."""
    spec.validate()
    pmap.validate(spec)
    params.validate()
    order = {name: i for i, name in enumerate(spec.routers)}
    cc_ps = spec.cc_latency_ps if spec.cc_latency_ps is not None else params.cc_latency_ps

    link_of: dict[frozenset, int] = {}
    bsm_names: list[str] = []
    bsm_links: dict[str, tuple[str, str, float]] = {}
    worker_of = dict(pmap.assignment)
    for idx, (a, b, length) in enumerate(spec.qlinks):
        left, right = (a, b) if order[a] < order[b] else (b, a)
        name = f"b{idx}"
        link_of[frozenset((a, b))] = idx
        bsm_names.append(name)
        bsm_links[name] = (left, right, length)
        worker_of[name] = pmap.worker_of(left)

    mem_cursor = {name: 0 for name in spec.routers}
    slot_cursor = [0] * len(spec.qlinks)
    memories: dict[str, list[PlannedMemory]] = {name: [] for name in spec.routers}
    swap_duties: dict[str, list[SwapDuty]] = {}
    endpoint_roles: dict[str, list[EndpointRole]] = {}

    def side_alloc(flow: Flow, router: str, toward_prev: bool) -> int:
        if router == flow.src or router == flow.dst:
            return flow.demand_end
        return flow.demand_mid // 2 if toward_prev else flow.demand_mid - flow.demand_mid // 2

    for flow_id, flow in enumerate(flows):
        endpoint_roles.setdefault(flow.src, []).append(
            EndpointRole(flow_id, flow.dst, True))
        endpoint_roles.setdefault(flow.dst, []).append(
            EndpointRole(flow_id, flow.src, False))
        _segment_duties(flow.path, flow_id, swap_duties)
        for u, v in zip(flow.path, flow.path[1:]):
            link_id = link_of[frozenset((u, v))]
            pairs = min(side_alloc(flow, u, toward_prev=False),
                        side_alloc(flow, v, toward_prev=True))
            if pairs < 1:
                raise PlanError(
                    f"flow {flow.src}->{flow.dst} allocates no pairs on ({u}, {v})")
            left_name = bsm_links[f"b{link_id}"][0]
            for _ in range(pairs):
                slot = slot_cursor[link_id]
                slot_cursor[link_id] += 1
                ids = {}
                for router in (u, v):
                    ids[router] = f"{router}:m{mem_cursor[router]}"
                    mem_cursor[router] += 1
                for router, other in ((u, v), (v, u)):
                    memories[router].append(PlannedMemory(
                        mem_id=ids[router], router=router,
                        index=int(ids[router].rsplit("m", 1)[1]),
                        flow_id=flow_id, link_id=link_id,
                        side="L" if router == left_name else "R",
                        slot=slot, bsm=f"b{link_id}",
                        partner_router=other, partner_mem=ids[other]))

    for name, used in mem_cursor.items():
        capacity = spec.memories.get(name, 0)
        if used > capacity:
            raise InsufficientMemories(
                f"router {name} needs {used} memories but has {capacity}")

    links: list[sync.Link] = []
    max_qc = 0
    for idx, (a, b, length) in enumerate(spec.qlinks):
        name = f"b{idx}"
        qc = params.qc_delay_ps(length / 2.0)
        max_qc = max(max_qc, qc)
        links.append(sync.Link(a, name, qc, sync.QUANTUM))
        links.append(sync.Link(b, name, qc, sync.QUANTUM))
        links.append(sync.Link(name, a, cc_ps, sync.CLASSICAL))
        links.append(sync.Link(name, b, cc_ps, sync.CLASSICAL))
    mesh: set[tuple[str, str]] = set()
    for flow in flows:
        for u in flow.path:
            for v in flow.path:
                if u != v:
                    mesh.add((u, v))
    for u, v in sorted(mesh):
        links.append(sync.Link(u, v, cc_ps, sync.CLASSICAL))

    lagged = {name for name, (left, right, _l) in bsm_links.items()
              if pmap.worker_of(left) != pmap.worker_of(right)}

    max_slots = max(slot_cursor, default=0)
    span = max_qc + cc_ps + max_slots * params.slot_spacing_ps
    period = align_up(max(span, 1), params.memory_period_ps)

    return NetworkPlan(spec=spec, flows=flows, pmap=pmap, params=params,
                       worker_of=worker_of, bsm_names=bsm_names,
                       bsm_links=bsm_links, links=links, lagged=lagged,
                       memories=memories, swap_duties=swap_duties,
                       endpoint_roles=endpoint_roles, round_period_ps=period,
                       cc_ps=cc_ps)


def compute_lookahead(plan: NetworkPlan, mode: str) -> int:
    """Safe window size in ps for the given synchronization mode."""
    if mode == "baseline":
        return sync.baseline_lookahead(plan.links, plan.worker_of)
    if mode == "half_classical":
        return sync.lagged_lookahead(plan.links, plan.worker_of, plan.lagged)
    raise ValueError(f"unknown lookahead mode {mode!r}")


# -- runtime entities ----------------------------------------------------------


class MemorySlot:
    """Mutable per-memory state next to its immutable plan entry."""

    __slots__ = ("plan", "key", "status", "epoch", "round", "partner_router",
                 "partner_mem", "partner_epoch", "fidelity", "purified",
                 "awaiting", "entangled_at")

    def __init__(self, plan: PlannedMemory, key: str) -> None:
        self.plan = plan
        self.key = key
        self.status = RAW
        self.epoch = 0
        self.round = -1
        self.partner_router = ""
        self.partner_mem = ""
        self.partner_epoch = -1
        self.fidelity = 0.0
        self.purified = False
        self.awaiting = False
        self.entangled_at = -1

    def reset(self) -> None:
        self.status = RAW
        self.epoch += 1
        self.partner_router = ""
        self.partner_mem = ""
        self.partner_epoch = -1
        self.fidelity = 0.0
        self.purified = False
        self.awaiting = False
        self.entangled_at = -1


class Router:
    """A quantum router: memory bank, generation rounds, swapping, delivery."""

    def __init__(self, name: str, scheduler: Scheduler, qsm: LocalStateManager,
                 plan: NetworkPlan, purify: bool = False) -> None:
        self.name = name
        self.scheduler = scheduler
        self.qsm = qsm
        self.plan = plan
        self.params = plan.params
        self.purify_enabled = purify
        self.rng = scheduler.rng.stream(name)
        self.slots: list[MemorySlot] = []
        self.by_id: dict[str, MemorySlot] = {}
        for planned in plan.memories[name]:
            slot = MemorySlot(planned, qsm.new_key(planned.mem_id))
            self.slots.append(slot)
            self.by_id[planned.mem_id] = slot
        self.duties = plan.swap_duties.get(name, [])
        self.roles = plan.endpoint_roles.get(name, [])
        self.deliveries: dict[int, dict] = {
            role.flow_id: {"delivered": 0, "first_ps": None, "last_ps": None,
                           "fidelity_sum": 0.0}
            for role in self.roles if role.is_source}

    def init_state(self) -> None:
        for slot in self.slots:
            self.qsm.set([slot.key], _ZERO)

    def start(self) -> None:
        self.init_state()
        if self.slots:
            self.scheduler.schedule(self.name, self.name, "round", {"n": 0}, 0)

    # -- handlers ------------------------------------------------------------

    def round(self, time: int, payload: dict) -> None:
        n = payload["n"]
        params = self.params
        for slot in self.slots:
            if slot.status == ENTANGLED:
                continue
            if slot.status == EMITTING:
                # The previous attempt died silently (photon lost downstream
                # or the herald never formed); the grid edge is its deadline.
                slot.reset()
            mem_rng = self.scheduler.rng.stream(slot.plan.mem_id)
            if mem_rng.random() >= params.memory_efficiency:
                continue  # no photon this round; the next tick retries
            slot.epoch += 1
            slot.round = n
            photon = self.qsm.new_key(slot.plan.mem_id)
            self.qsm.set([slot.key, photon], bell_amps())
            slot.status = EMITTING
            left, right, length = self.plan.bsm_links[slot.plan.bsm]
            if mem_rng.random() >= params.survival(length / 2.0):
                # Fiber loss is the emitter's own draw, so it learns at once.
                self.qsm.set([photon], _ZERO)
                self.qsm.discard(photon)
                slot.reset()
                continue
            arrival = (time + slot.plan.slot * params.slot_spacing_ps
                       + params.qc_delay_ps(length / 2.0))
            fragment = self.qsm.transfer_out(
                photon, self.plan.worker_of[slot.plan.bsm])
            self.scheduler.schedule(self.name, slot.plan.bsm, "photon", {
                "qubit": fragment, "mem": slot.plan.mem_id, "router": self.name,
                "side": slot.plan.side, "slot": slot.plan.slot,
                "epoch": slot.epoch}, arrival)
        self.scheduler.schedule(self.name, self.name, "round",
                                {"n": n + 1}, (n + 1) * self.plan.round_period_ps)

    def herald(self, time: int, payload: dict) -> None:
        slot = self.by_id[payload["mem"]]
        if payload["epoch"] != slot.epoch or slot.status != EMITTING:
            return
        slot.status = ENTANGLED
        slot.partner_router = payload["partner_router"]
        slot.partner_mem = payload["partner_mem"]
        slot.partner_epoch = payload["partner_epoch"]
        slot.fidelity = payload["fidelity"]
        slot.purified = not self.purify_enabled
        slot.entangled_at = payload["entangled_at"]
        outcome = payload.get("correction")
        if outcome is not None and outcome in CORRECTION_CIRCUITS:
            self.qsm.run(CORRECTION_CIRCUITS[outcome], [slot.key])
        self.scheduler.schedule(
            self.name, self.name, "expire", {"mem": slot.plan.mem_id,
                                             "epoch": slot.epoch},
            max(slot.entangled_at + self.params.coherence_ps, time))
        if self.purify_enabled:
            self._try_purify(time, slot)
        self._scan_duties(time)

    def retry(self, time: int, payload: dict) -> None:
        slot = self.by_id[payload["mem"]]
        if payload["epoch"] == slot.epoch and slot.status == EMITTING:
            slot.reset()

    def correction(self, time: int, payload: dict) -> None:
        slot = self.by_id[payload["mem"]]
        if payload["epoch"] != slot.epoch or slot.status != ENTANGLED:
            return
        outcome = payload["outcome"]
        if outcome in CORRECTION_CIRCUITS:
            self.qsm.run(CORRECTION_CIRCUITS[outcome], [slot.key])
        self._repartner(time, slot, payload)

    def partner_update(self, time: int, payload: dict) -> None:
        slot = self.by_id[payload["mem"]]
        if payload["epoch"] != slot.epoch or slot.status != ENTANGLED:
            return
        self._repartner(time, slot, payload)

    def partner_lost(self, time: int, payload: dict) -> None:
        slot = self.by_id[payload["mem"]]
        if payload["epoch"] != slot.epoch or slot.status != ENTANGLED:
            return
        self.qsm.set([slot.key], _ZERO)
        slot.reset()

    def expire(self, time: int, payload: dict) -> None:
        slot = self.by_id[payload["mem"]]
        if payload["epoch"] != slot.epoch or slot.status != ENTANGLED:
            return  # stale handle: the pair was consumed earlier
        partner_router = slot.partner_router
        message = {"mem": slot.partner_mem, "epoch": slot.partner_epoch}
        self.qsm.set([slot.key], _ZERO)
        slot.reset()
        self.scheduler.schedule(self.name, partner_router, "partner_lost",
                                message, time + self.plan.cc_ps)

    # -- purification ----------------------------------------------------------

    def purify_notice(self, time: int, payload: dict) -> None:
        kept = self.by_id[payload["kept_mem"]]
        sac = self.by_id[payload["sac_mem"]]
        stale = (payload["kept_epoch"] != kept.epoch or kept.status != ENTANGLED
                 or payload["sac_epoch"] != sac.epoch or sac.status != ENTANGLED)
        if stale:
            return
        sac_rng = self.scheduler.rng.stream(sac.plan.mem_id)
        outcome = self.qsm.run(PURIFY_CIRCUIT, [kept.key, sac.key],
                               prob_sample=sac_rng.random())
        self.qsm.set([sac.key], _ZERO)
        sac.reset()
        match = outcome == payload["outcome"]
        reply = {"kept_mem": kept.partner_mem, "epoch": kept.partner_epoch,
                 "match": match, "fidelity": payload["fidelity"]}
        if match:
            kept.purified = True
            kept.fidelity = payload["fidelity"]
        else:
            self.qsm.set([kept.key], _ZERO)
            kept.reset()
        self.scheduler.schedule(self.name, payload["from"], "purify_result",
                                reply, time + self.plan.cc_ps)
        if match:
            self._scan_duties(time)

    def purify_result(self, time: int, payload: dict) -> None:
        kept = self.by_id[payload["kept_mem"]]
        if payload["epoch"] != kept.epoch or kept.status != ENTANGLED:
            return
        kept.awaiting = False
        if payload["match"]:
            kept.purified = True
            kept.fidelity = payload["fidelity"]
            self._scan_duties(time)
        else:
            self.qsm.set([kept.key], _ZERO)
            kept.reset()

    def _try_purify(self, time: int, fresh: MemorySlot) -> None:
        # The link's lower-index router initiates; one round of sacrifice per
        # kept pair.  Candidates are raw-heralded pairs on the same link.
        left, _right, _length = self.plan.bsm_links[fresh.plan.bsm]
        if self.name != left:
            return
        group = [s for s in self.slots
                 if s.status == ENTANGLED and not s.purified and not s.awaiting
                 and s.plan.link_id == fresh.plan.link_id
                 and s.plan.flow_id == fresh.plan.flow_id]
        while len(group) >= 2:
            kept, sac = group[0], group[1]
            group = group[2:]
            sac_rng = self.scheduler.rng.stream(sac.plan.mem_id)
            outcome = self.qsm.run(PURIFY_CIRCUIT, [kept.key, sac.key],
                                   prob_sample=sac_rng.random())
            f = kept.fidelity
            f_next = f * f / (f * f + (1.0 - f) * (1.0 - f))
            notice = {"kept_mem": kept.partner_mem,
                      "kept_epoch": kept.partner_epoch,
                      "sac_mem": sac.partner_mem,
                      "sac_epoch": sac.partner_epoch,
                      "outcome": outcome, "fidelity": f_next,
                      "from": self.name}
            self.scheduler.schedule(self.name, kept.partner_router,
                                    "purify_notice", notice,
                                    time + self.plan.cc_ps)
            kept.awaiting = True  # off-limits until the partner's verdict
            self.qsm.set([sac.key], _ZERO)
            sac.reset()

    # -- swapping and delivery ---------------------------------------------------

    def _repartner(self, time: int, slot: MemorySlot, payload: dict) -> None:
        slot.partner_router = payload["partner_router"]
        slot.partner_mem = payload["partner_mem"]
        slot.partner_epoch = payload["partner_epoch"]
        slot.fidelity = payload["fidelity"]
        slot.purified = True  # swapped pairs are made from usable inputs
        self._scan_duties(time)

    def _usable(self, slot: MemorySlot, flow_id: int, partner: str) -> bool:
        return (slot.status == ENTANGLED and slot.purified
                and slot.plan.flow_id == flow_id
                and slot.partner_router == partner)

    def _scan_duties(self, time: int) -> None:
        for role in self.roles:
            flow = self.plan.flows[role.flow_id]
            for slot in self.slots:
                if self._usable(slot, role.flow_id, role.other_end):
                    if role.is_source:
                        record = self.deliveries[role.flow_id]
                        record["delivered"] += 1
                        if record["first_ps"] is None:
                            record["first_ps"] = time
                        record["last_ps"] = time
                        record["fidelity_sum"] += slot.fidelity
                    self.qsm.set([slot.key], _ZERO)
                    slot.reset()
        for duty in self.duties:
            while True:
                left = next((s for s in self.slots
                             if self._usable(s, duty.flow_id, duty.left_end)), None)
                right = next((s for s in self.slots
                              if self._usable(s, duty.flow_id, duty.right_end)), None)
                if left is None or right is None:
                    break
                self._swap(time, duty, left, right)

    def _swap(self, time: int, duty: SwapDuty, left: MemorySlot,
              right: MemorySlot) -> None:
        params = self.params
        succeeded = (params.swap_success >= 1.0
                     or self.rng.random() < params.swap_success)
        if succeeded:
            outcome = self.qsm.run(BSM_CIRCUIT, [left.key, right.key],
                                   prob_sample=self.rng.random())
            fidelity = left.fidelity * right.fidelity
            update = {"mem": left.partner_mem, "epoch": left.partner_epoch,
                      "partner_router": duty.right_end,
                      "partner_mem": right.partner_mem,
                      "partner_epoch": right.partner_epoch,
                      "fidelity": fidelity}
            fix = {"mem": right.partner_mem, "epoch": right.partner_epoch,
                   "partner_router": duty.left_end,
                   "partner_mem": left.partner_mem,
                   "partner_epoch": left.partner_epoch,
                   "fidelity": fidelity, "outcome": outcome}
            self.scheduler.schedule(self.name, duty.left_end, "partner_update",
                                    update, time + self.plan.cc_ps)
            self.scheduler.schedule(self.name, duty.right_end, "correction",
                                    fix, time + self.plan.cc_ps)
        else:
            for slot in (left, right):
                self.scheduler.schedule(
                    self.name, slot.partner_router, "partner_lost",
                    {"mem": slot.partner_mem, "epoch": slot.partner_epoch},
                    time + self.plan.cc_ps)
        for slot in (left, right):
            self.qsm.set([slot.key], _ZERO)
            slot.reset()


class BsmNode:
    """Midpoint heralding station of one quantum link.

    Keeps a single pending-photon slot: a second arrival within the detector
    resolution pairs with it, anything else evicts it as a failure.  Every
    detection respects the per-side dead time.
    """

    def __init__(self, name: str, scheduler: Scheduler, qsm: LocalStateManager,
                 plan: NetworkPlan) -> None:
        self.name = name
        self.scheduler = scheduler
        self.qsm = qsm
        self.plan = plan
        self.params = plan.params
        self.rng = scheduler.rng.stream(name)
        self.left, self.right, self.length = plan.bsm_links[name]
        self.pending: dict | None = None
        self.last_click = {"L": -(1 << 62), "R": -(1 << 62)}

    def _drop(self, time: int, entry: dict) -> None:
        # A photon that failed to herald: collapse it away and tell its
        # memory's router to retry.
        self.qsm.set([entry["key"]], _ZERO)
        self.qsm.discard(entry["key"])
        self.scheduler.schedule(self.name, entry["router"], "retry",
                                {"mem": entry["mem"], "epoch": entry["epoch"]},
                                time + self.plan.cc_ps)

    def photon(self, time: int, payload: dict) -> None:
        self.qsm.receive_transfer(payload["qubit"])
        entry = {"time": time, "side": payload["side"], "mem": payload["mem"],
                 "router": payload["router"], "key": payload["qubit"]["key"],
                 "epoch": payload["epoch"], "slot": payload["slot"]}
        detected = self.rng.random() < self.params.detector_efficiency
        if detected and time - self.last_click[entry["side"]] < self.params.dead_time_ps:
            detected = False
        if detected:
            self.last_click[entry["side"]] = time
        if not detected:
            self._drop(time, entry)
            return
        pending = self.pending
        if (pending is not None
                and time - pending["time"] <= self.params.resolution_ps
                and pending["side"] != entry["side"]):
            self.pending = None
            self._coincide(time, pending, entry)
            return
        if pending is not None:
            self._drop(time, pending)
        self.pending = entry

    def _coincide(self, time: int, first: dict, second: dict) -> None:
        left_ph, right_ph = (first, second) if first["side"] == "L" else (second, first)
        if self.rng.random() >= self.params.bsm_success:
            self._drop(time, first)
            self._drop(time, second)
            return
        outcome = self.qsm.run(BSM_CIRCUIT, [left_ph["key"], right_ph["key"]],
                               prob_sample=self.rng.random())
        self.qsm.discard(left_ph["key"])
        self.qsm.discard(right_ph["key"])
        fidelity = self.params.raw_fidelity
        herald_left = {"mem": left_ph["mem"], "epoch": left_ph["epoch"],
                       "partner_router": right_ph["router"],
                       "partner_mem": right_ph["mem"],
                       "partner_epoch": right_ph["epoch"],
                       "fidelity": fidelity, "entangled_at": time}
        herald_right = {"mem": right_ph["mem"], "epoch": right_ph["epoch"],
                        "partner_router": left_ph["router"],
                        "partner_mem": left_ph["mem"],
                        "partner_epoch": left_ph["epoch"],
                        "fidelity": fidelity, "entangled_at": time,
                        "correction": outcome}
        arrive = time + self.plan.cc_ps
        self.scheduler.schedule(self.name, left_ph["router"], "herald",
                                herald_left, arrive)
        self.scheduler.schedule(self.name, right_ph["router"], "herald",
                                herald_right, arrive)


# -- worker assembly -----------------------------------------------------------


def build_worker(plan: NetworkPlan, worker_id: int, scheduler: Scheduler,
                 qsm: LocalStateManager, *, lagged_mode: bool = False,
                 purify: bool = False) -> dict[str, object]:
    """Instantiate and start this worker's entities; returns them by name."""
    entities: dict[str, object] = {}
    for name in plan.routers:
        if plan.worker_of[name] != worker_id:
            continue
        router = Router(name, scheduler, qsm, plan, purify=purify)
        scheduler.register(router)
        entities[name] = router
    for name in plan.bsm_names:
        if plan.worker_of[name] != worker_id:
            continue
        lane = LAGGED_LANE if lagged_mode and name in plan.lagged else MAIN_LANE
        node = BsmNode(name, scheduler, qsm, plan)
        scheduler.register(node, lane=lane)
        entities[name] = node
    for entity in entities.values():
        if isinstance(entity, Router):
            entity.start()
    return entities


def merge_deliveries(parts: list[dict]) -> dict:
    """Combine per-worker delivery records; flow ids never collide."""
    merged: dict = {}
    for part in parts:
        for flow_id, record in part.items():
            merged[str(flow_id)] = record
    return dict(sorted(merged.items(), key=lambda kv: int(kv[0])))


def collect_deliveries(entities: dict[str, object]) -> dict:
    out: dict = {}
    for entity in entities.values():
        if isinstance(entity, Router):
            for flow_id, record in entity.deliveries.items():
                out[str(flow_id)] = dict(record)
    return out
