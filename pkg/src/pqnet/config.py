"""Run configuration: JSON loading, validation, and materialization.

A run is described by one JSON document.  Every section is optional and
every field has a default, so ``{}`` is a valid configuration (a linear
two-router network at the hardware baseline).  Unknown keys anywhere are
rejected: a typo should fail loudly, not silently fall back to a default.

``config_hash`` covers only the fields that determine simulation *results*:
topology, flows, hardware, seed, horizon, and purification.  Worker count,
partitioning, lookahead mode, batching, offloading, duplication, and
transport are excluded on purpose; the engine guarantees they do not change
outcomes, and reports compare runs by this hash to enforce like-for-like.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from . import topology
from .models import HardwareParams, NetworkPlan, PlanError, plan_network
from .topology import AnnealConfig, Flow, NetworkSpec, PartitionMap


class ParseError(ValueError):
    """The document is not valid JSON."""


class ValidationError(ValueError):
    """A field is missing, unknown, mistyped, or out of range."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


TOPOLOGY_KINDS = ("linear", "caveman", "as_like")
FLOW_KINDS = ("end_to_end", "random", "none")
PARTITION_METHODS = ("blocks", "caveman", "anneal", "explicit")
LOOKAHEAD_MODES = ("baseline", "half_classical")
TRANSPORTS = ("threads", "processes")

_HW_FIELDS = {
    "memory_efficiency": float, "memory_frequency_hz": float,
    "coherence_time_s": float, "raw_fidelity": float,
    "detector_efficiency": float, "count_rate_hz": float,
    "dark_count_hz": float, "resolution_ps": int,
    "attenuation_db_per_km": float, "light_speed_m_per_s": float,
    "tdm_frame_ps": int, "gate_fidelity": float, "swap_success": float,
    "bsm_success": float, "qc_length_km": float, "cc_latency_ms": float,
}


def _section(data: dict, key: str, path: str) -> dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ValidationError(_join(path, key), "expected an object")
    return dict(value)


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _reject_unknown(data: dict, path: str) -> None:
    for key in data:
        raise ValidationError(_join(path, key), "unknown field")


def _take(data: dict, key: str, path: str, kind, default):
    if key not in data:
        return default
    value = data.pop(key)
    full = _join(path, key)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(full, f"expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(full, f"expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ValidationError(full, f"expected true or false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ValidationError(full, f"expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _choice(value: str, choices: tuple, path: str) -> str:
    if value not in choices:
        raise ValidationError(path, f"must be one of {', '.join(choices)}; "
                                    f"got {value!r}")
    return value


def _positive(value, path: str):
    if value <= 0:
        raise ValidationError(path, f"must be positive, got {value}")
    return value


@dataclass(frozen=True)
class TopologyConfig:
    kind: str = "linear"
    size: int = 2              # routers (linear, as_like)
    caves: int = 2             # caveman only
    clique: int = 4            # caveman only
    seed: int = 0              # as_like attachment seed
    length_km: float | None = None  # defaults to hardware.qc_length_km
    memories_per_router: int = 100

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FlowsConfig:
    kind: str = "end_to_end"
    seed: int = 0
    endpoint_memories: int = 25
    intermediate_memories: int = 50

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PartitionConfig:
    method: str = "blocks"
    energy: str = "P2"         # anneal objective
    iterations: int = 10_000
    seed: int = 0
    map: dict | None = None    # explicit router -> worker

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FeaturesConfig:
    batching: bool = True
    offloading: bool = True
    purification: bool = False
    duplication_factor: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    flows: FlowsConfig = field(default_factory=FlowsConfig)
    hardware: HardwareParams = field(default_factory=HardwareParams)
    seed: int = 0
    end_time_ms: float = 100.0
    workers: int = 1
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    lookahead: str = "baseline"
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    server: str | None = None
    transport: str = "threads"

    @property
    def end_time_ps(self) -> int:
        return round(self.end_time_ms * 1_000_000_000)

    def as_dict(self) -> dict:
        return {
            "topology": self.topology.as_dict(),
            "flows": self.flows.as_dict(),
            "hardware": asdict(self.hardware),
            "seed": self.seed,
            "end_time_ms": self.end_time_ms,
            "workers": self.workers,
            "partition": self.partition.as_dict(),
            "lookahead": self.lookahead,
            "features": self.features.as_dict(),
            "server": self.server,
            "transport": self.transport,
        }


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON object; returns the fully defaulted config."""
    if not isinstance(data, dict):
        raise ValidationError("", "the top level must be an object")
    data = dict(data)

    topo_raw = _section(data, "topology", "")
    data.pop("topology", None)
    kind = _choice(_take(topo_raw, "kind", "topology", str, "linear"),
                   TOPOLOGY_KINDS, "topology.kind")
    length_km = topo_raw.pop("length_km", None)  # null means hardware default
    if length_km is not None:
        if isinstance(length_km, bool) or not isinstance(length_km, (int, float)):
            raise ValidationError("topology.length_km",
                                  f"expected a number, got {length_km!r}")
        length_km = _positive(float(length_km), "topology.length_km")
    topo = TopologyConfig(
        kind=kind,
        size=_positive(_take(topo_raw, "size", "topology", int, 2),
                       "topology.size"),
        caves=_positive(_take(topo_raw, "caves", "topology", int, 2),
                        "topology.caves"),
        clique=_positive(_take(topo_raw, "clique", "topology", int, 4),
                         "topology.clique"),
        seed=_take(topo_raw, "seed", "topology", int, 0),
        length_km=length_km,
        memories_per_router=_positive(
            _take(topo_raw, "memories_per_router", "topology", int, 100),
            "topology.memories_per_router"))
    _reject_unknown(topo_raw, "topology")

    flows_raw = _section(data, "flows", "")
    data.pop("flows", None)
    flows = FlowsConfig(
        kind=_choice(_take(flows_raw, "kind", "flows", str, "end_to_end"),
                     FLOW_KINDS, "flows.kind"),
        seed=_take(flows_raw, "seed", "flows", int, 0),
        endpoint_memories=_positive(
            _take(flows_raw, "endpoint_memories", "flows", int, 25),
            "flows.endpoint_memories"),
        intermediate_memories=_positive(
            _take(flows_raw, "intermediate_memories", "flows", int, 50),
            "flows.intermediate_memories"))
    _reject_unknown(flows_raw, "flows")

    hw_raw = _section(data, "hardware", "")
    data.pop("hardware", None)
    defaults = HardwareParams()
    hw_values = {}
    for name, kind_ in _HW_FIELDS.items():
        hw_values[name] = _take(hw_raw, name, "hardware", kind_,
                                getattr(defaults, name))
    _reject_unknown(hw_raw, "hardware")
    hardware = HardwareParams(**hw_values)
    try:
        hardware.validate()
    except PlanError as exc:
        raise ValidationError("hardware", str(exc)) from exc

    part_raw = _section(data, "partition", "")
    data.pop("partition", None)
    method = _choice(_take(part_raw, "method", "partition", str, "blocks"),
                     PARTITION_METHODS, "partition.method")
    energy = _choice(_take(part_raw, "energy", "partition", str, "P2"),
                     topology.ENERGY_KINDS, "partition.energy")
    explicit = part_raw.pop("map", None)
    if explicit is not None:
        if (not isinstance(explicit, dict)
                or not all(isinstance(k, str) and isinstance(v, int)
                           and not isinstance(v, bool)
                           for k, v in explicit.items())):
            raise ValidationError("partition.map",
                                  "expected an object of router -> worker")
        if method != "explicit":
            raise ValidationError("partition.map",
                                  "only valid with method \"explicit\"")
    elif method == "explicit":
        raise ValidationError("partition.map",
                              "required when method is \"explicit\"")
    partition = PartitionConfig(
        method=method, energy=energy,
        iterations=_take(part_raw, "iterations", "partition", int, 10_000),
        seed=_take(part_raw, "seed", "partition", int, 0),
        map=explicit)
    if partition.iterations < 0:
        raise ValidationError("partition.iterations",
                              f"cannot be negative, got {partition.iterations}")
    _reject_unknown(part_raw, "partition")

    feat_raw = _section(data, "features", "")
    data.pop("features", None)
    features = FeaturesConfig(
        batching=_take(feat_raw, "batching", "features", bool, True),
        offloading=_take(feat_raw, "offloading", "features", bool, True),
        purification=_take(feat_raw, "purification", "features", bool, False),
        duplication_factor=_take(feat_raw, "duplication_factor", "features",
                                 int, 0))
    if not 0 <= features.duplication_factor <= 8:
        raise ValidationError("features.duplication_factor",
                              f"must be between 0 and 8, got "
                              f"{features.duplication_factor}")
    _reject_unknown(feat_raw, "features")

    seed = _take(data, "seed", "", int, 0)
    end_time_ms = _positive(_take(data, "end_time_ms", "", float, 100.0),
                            "end_time_ms")
    workers = _positive(_take(data, "workers", "", int, 1), "workers")
    lookahead = _choice(_take(data, "lookahead", "", str, "baseline"),
                        LOOKAHEAD_MODES, "lookahead")
    server = data.pop("server", None)
    if server is not None and not isinstance(server, str):
        raise ValidationError("server", f"expected a string, got {server!r}")
    transport = _choice(_take(data, "transport", "", str, "threads"),
                        TRANSPORTS, "transport")
    _reject_unknown(data, "")

    return RunConfig(topology=topo, flows=flows, hardware=hardware, seed=seed,
                     end_time_ms=end_time_ms, workers=workers,
                     partition=partition, lookahead=lookahead,
                     features=features, server=server, transport=transport)


def load_doc(path: str) -> dict:
    """Raw configuration document; command-line overrides edit this."""
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return data


def load_config(path: str) -> RunConfig:
    return parse_config(load_doc(path))


def config_hash(config: RunConfig) -> str:
    """Digest of the result-determining fields only (see module docstring)."""
    semantic = {
        "topology": config.topology.as_dict(),
        "flows": config.flows.as_dict(),
        "hardware": asdict(config.hardware),
        "seed": config.seed,
        "end_time_ms": config.end_time_ms,
        "purification": config.features.purification,
    }
    canon = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# -- turning a config into simulation inputs -----------------------------------


@dataclass
class Materials:
    """Everything a runner needs, derived deterministically from a config."""

    config: RunConfig
    spec: NetworkSpec
    flows: list[Flow]
    pmap: PartitionMap
    plan: NetworkPlan

    @property
    def params(self) -> HardwareParams:
        return self.plan.params


def build_spec(config: RunConfig) -> NetworkSpec:
    topo = config.topology
    length = topo.length_km if topo.length_km is not None else config.hardware.qc_length_km
    mem = topo.memories_per_router
    try:
        if topo.kind == "linear":
            return topology.gen_linear(topo.size, length, mem)
        if topo.kind == "caveman":
            return topology.gen_caveman(topo.caves, topo.clique, length, mem)
        return topology.gen_as_like(topo.size, topo.seed, length, mem)
    except topology.InvalidSize as exc:
        raise ValidationError("topology", str(exc)) from exc


def build_flows(config: RunConfig, spec: NetworkSpec) -> list[Flow]:
    fc = config.flows
    if fc.kind == "none":
        return []
    if fc.kind == "end_to_end":
        return topology.end_to_end_flow(spec, fc.endpoint_memories,
                                        fc.intermediate_memories)
    return topology.gen_flows(spec, fc.seed, fc.endpoint_memories,
                              fc.intermediate_memories)


def build_partition(config: RunConfig, spec: NetworkSpec,
                    flows: list[Flow]) -> PartitionMap:
    pc = config.partition
    try:
        if pc.method == "blocks":
            return topology.partition_blocks(spec, config.workers)
        if pc.method == "caveman":
            return topology.partition_caveman(spec, config.workers)
        if pc.method == "anneal":
            anneal = AnnealConfig(iterations=pc.iterations, seed=pc.seed,
                                  kind=pc.energy)
            return topology.anneal_partition(spec, flows, config.workers,
                                             anneal)
        pmap = PartitionMap(dict(pc.map), config.workers)
        pmap.validate(spec)
        return pmap
    except (topology.IndivisiblePartition, topology.InvalidSize) as exc:
        raise ValidationError("partition", str(exc)) from exc
    except ValueError as exc:
        raise ValidationError("partition", str(exc)) from exc


def materialize(config: RunConfig) -> Materials:
    """Build the network, flows, partition, and plan for a run."""
    spec = build_spec(config)
    flows = build_flows(config, spec)
    pmap = build_partition(config, spec, flows)
    try:
        plan = plan_network(spec, flows, pmap, config.hardware)
    except PlanError as exc:
        raise ValidationError("topology.memories_per_router", str(exc)) from exc
    if config.features.purification:
        per_hop: dict[tuple, int] = {}
        for planned_list in plan.memories.values():
            for planned in planned_list:
                if planned.side == "L":
                    key = (planned.flow_id, planned.link_id)
                    per_hop[key] = per_hop.get(key, 0) + 1
        for (flow_id, link_id), pairs in sorted(per_hop.items()):
            if pairs < 2:
                flow = flows[flow_id]
                raise ValidationError(
                    "features.purification",
                    f"flow {flow.src}->{flow.dst} has only {pairs} pair(s) on "
                    f"link b{link_id}; distillation needs at least 2")
    return Materials(config=config, spec=spec, flows=flows, pmap=pmap,
                     plan=plan)
