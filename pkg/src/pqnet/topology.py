"""Topology generation, flow placement, partitioning, and load analytics.

Everything in this module runs before the simulation starts and is plain
deterministic computation: generators and the annealer take explicit seeds,
iterate routers in index order, and break ties by index, so a given (spec,
seed) pair produces the same network, flows, and partition on every platform.

Router names are positional ("r0", "r1", ...); the order of
``NetworkSpec.routers`` is the canonical index order used for block
partitioning and every tie-break.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

ENERGY_KINDS = ("P1", "P2", "P3")

#: Default per-flow memory demands: endpoints park this many memories toward
#: their single path neighbor; intermediates split theirs between both sides.
END_DEMAND = 25
MID_DEMAND = 50


class InvalidSize(ValueError):
    """A generator was asked for a structurally impossible network."""


class IndivisiblePartition(ValueError):
    """The requested worker count does not divide the structure."""


@dataclass(frozen=True)
class Flow:
    """One entanglement-distribution demand between two routers.

    ``path`` is a shortest path in the quantum-link graph, endpoints
    included.  Demands are memory counts: ``demand_end`` at either endpoint,
    ``demand_mid`` at every intermediate router (half toward each neighbor).
    """

    src: str
    dst: str
    path: tuple[str, ...]
    demand_end: int = END_DEMAND
    demand_mid: int = MID_DEMAND

    def demand_at(self, router: str) -> int:
        if router == self.src or router == self.dst:
            return self.demand_end
        if router in self.path:
            return self.demand_mid
        return 0

    def as_dict(self) -> dict:
        return {"src": self.src, "dst": self.dst, "path": list(self.path),
                "demand_end": self.demand_end, "demand_mid": self.demand_mid}

    @classmethod
    def from_dict(cls, data: dict) -> "Flow":
        return cls(data["src"], data["dst"], tuple(data["path"]),
                   int(data["demand_end"]), int(data["demand_mid"]))


@dataclass
class NetworkSpec:
    """A quantum network: routers, quantum links, capacities, and flows.

    Quantum links are undirected (a, b, fiber length in km) triples with a
    heralding midpoint implied on each.  Classical connectivity is a full
    mesh at a single configurable latency and is not stored per-pair.
    ``groups`` records clique membership for generators that have one
    (caveman), enabling group-aligned partitioning.
    """

    routers: list[str]
    qlinks: list[tuple[str, str, float]]
    memories: dict[str, int]
    flows: list[Flow] = field(default_factory=list)
    groups: list[list[str]] | None = None
    cc_latency_ps: int | None = None  # None: hardware default applies

    def index_of(self, router: str) -> int:
        try:
            return self.routers.index(router)
        except ValueError:
            raise InvalidSize(f"unknown router {router!r}") from None

    def adjacency(self) -> dict[str, list[str]]:
        """Neighbor lists in router index order (the tie-break order)."""
        order = {name: i for i, name in enumerate(self.routers)}
        adj: dict[str, list[str]] = {name: [] for name in self.routers}
        for a, b, _length in self.qlinks:
            adj[a].append(b)
            adj[b].append(a)
        for name in adj:
            adj[name].sort(key=order.__getitem__)
        return adj

    def validate(self) -> None:
        names = set(self.routers)
        if len(names) != len(self.routers):
            raise InvalidSize("duplicate router names")
        for a, b, length in self.qlinks:
            if a not in names or b not in names:
                raise InvalidSize(f"link ({a}, {b}) references unknown router")
            if a == b:
                raise InvalidSize(f"self-link on {a}")
            if length <= 0:
                raise InvalidSize(f"link ({a}, {b}) has non-positive length")
        if len(self.routers) > 1:
            dist = bfs_distances(self.adjacency(), self.routers[0])
            if len(dist) != len(self.routers):
                raise InvalidSize("quantum-link graph is not connected")
        linked = {frozenset((a, b)) for a, b, _l in self.qlinks}
        for flow in self.flows:
            if flow.path[0] != flow.src or flow.path[-1] != flow.dst:
                raise InvalidSize(f"flow {flow.src}->{flow.dst} path endpoints mismatch")
            if len(flow.path) < 2:
                raise InvalidSize(f"flow {flow.src}->{flow.dst} has no hops")
            for a, b in zip(flow.path, flow.path[1:]):
                if frozenset((a, b)) not in linked:
                    raise InvalidSize(
                        f"flow {flow.src}->{flow.dst} uses missing link ({a}, {b})")

    def as_dict(self) -> dict:
        return {
            "routers": list(self.routers),
            "qlinks": [[a, b, length] for a, b, length in self.qlinks],
            "memories": dict(self.memories),
            "flows": [flow.as_dict() for flow in self.flows],
            "groups": None if self.groups is None else [list(g) for g in self.groups],
            "cc_latency_ps": self.cc_latency_ps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(
            routers=list(data["routers"]),
            qlinks=[(a, b, float(length)) for a, b, length in data["qlinks"]],
            memories={k: int(v) for k, v in data["memories"].items()},
            flows=[Flow.from_dict(f) for f in data.get("flows", [])],
            groups=(None if data.get("groups") is None
                    else [list(g) for g in data["groups"]]),
            cc_latency_ps=data.get("cc_latency_ps"),
        )


# -- generators ---------------------------------------------------------------


def gen_linear(n: int, length_km: float = 1.0, memories: int = 100) -> NetworkSpec:
    """Path graph of ``n`` routers with uniform link lengths."""
    if n < 2:
        raise InvalidSize(f"linear network needs at least 2 routers, got {n}")
    routers = [f"r{i}" for i in range(n)]
    qlinks = [(routers[i], routers[i + 1], length_km) for i in range(n - 1)]
    return NetworkSpec(routers, qlinks, {name: memories for name in routers})


def gen_caveman(n_caves: int, k: int, length_km: float = 1.0,
                memories: int = 100) -> NetworkSpec:
    """``n_caves`` cliques of ``k``, rewired into a connected cycle.

    In every cave the edge between its first two routers is removed and the
    freed edge reconnects the cave's first router to the last router of the
    previous cave.  Edge count is therefore exactly the clique total,
    n_caves * k*(k-1)/2, and the rewired edges form the inter-cave cycle.
    """
    if n_caves < 2:
        raise InvalidSize(f"need at least 2 caves, got {n_caves}")
    if k < 3:
        # A 2-clique loses its only edge to rewiring, so the caves themselves
        # would fall apart; 3 is the smallest size that stays connected.
        raise InvalidSize(f"cave size must be at least 3, got {k}")
    n = n_caves * k
    routers = [f"r{i}" for i in range(n)]
    qlinks: list[tuple[str, str, float]] = []
    for cave in range(n_caves):
        base = cave * k
        for i in range(k):
            for j in range(i + 1, k):
                if i == 0 and j == 1:
                    continue  # the rewired edge
                qlinks.append((routers[base + i], routers[base + j], length_km))
        qlinks.append((routers[base], routers[(base - 1) % n], length_km))
    groups = [[routers[cave * k + i] for i in range(k)] for cave in range(n_caves)]
    return NetworkSpec(routers, qlinks, {name: memories for name in routers},
                       groups=groups)


def gen_as_like(n: int, seed: int, length_km: float = 1.0,
                memories: int = 100) -> NetworkSpec:
    """Random graph with a heavy-tailed degree sequence.

    Preferential attachment: a 3-router triangle core, then every new router
    attaches to two distinct existing routers chosen with probability
    proportional to current degree.  Early routers accumulate high degree and
    act as the core; late ones stay low-degree edge routers.
    """
    if n < 2:
        raise InvalidSize(f"network needs at least 2 routers, got {n}")
    routers = [f"r{i}" for i in range(n)]
    if n == 2:
        return NetworkSpec(routers, [(routers[0], routers[1], length_km)],
                           {name: memories for name in routers})
    rng = random.Random(seed)
    qlinks = [(routers[0], routers[1], length_km),
              (routers[1], routers[2], length_km),
              (routers[0], routers[2], length_km)]
    # One endpoint entry per edge end; sampling it uniformly is sampling
    # routers by degree.
    stubs = [0, 1, 1, 2, 0, 2]
    for i in range(3, n):
        targets: set[int] = set()
        while len(targets) < 2:
            targets.add(stubs[rng.randrange(len(stubs))])
        for t in sorted(targets):
            qlinks.append((routers[t], routers[i], length_km))
            stubs.extend((t, i))
    return NetworkSpec(routers, qlinks, {name: memories for name in routers})


# -- flows --------------------------------------------------------------------


def bfs_distances(adj: dict[str, list[str]], src: str) -> dict[str, int]:
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt: list[str] = []
        for node in frontier:
            for peer in adj[node]:
                if peer not in dist:
                    dist[peer] = dist[node] + 1
                    nxt.append(peer)
        frontier = nxt
    return dist


def shortest_path(adj: dict[str, list[str]], src: str, dst: str) -> tuple[str, ...]:
    """A shortest path, deterministic: BFS keeps the first (index-least) parent."""
    if src == dst:
        return (src,)
    parent: dict[str, str] = {src: src}
    frontier = [src]
    while frontier and dst not in parent:
        nxt: list[str] = []
        for node in frontier:
            for peer in adj[node]:
                if peer not in parent:
                    parent[peer] = node
                    nxt.append(peer)
        frontier = nxt
    if dst not in parent:
        raise InvalidSize(f"no path {src} -> {dst}")
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    path.reverse()
    return tuple(path)


def draw_hop_count(rng: random.Random) -> int:
    """Exponential(1) hop draw, rounded up so the minimum is one hop."""
    return max(1, math.ceil(rng.expovariate(1.0)))


def gen_flows(spec: NetworkSpec, seed: int, demand_end: int = END_DEMAND,
              demand_mid: int = MID_DEMAND) -> list[Flow]:
    """One flow per router toward a randomly drawn destination.

    The hop count comes from ``draw_hop_count``; the destination is uniform
    among routers at exactly that distance, falling back to the nearest
    distance that exists (ties toward the smaller one).
    """
    rng = random.Random(seed)
    adj = spec.adjacency()
    order = {name: i for i, name in enumerate(spec.routers)}
    flows: list[Flow] = []
    for src in spec.routers:
        hops = draw_hop_count(rng)
        dist = bfs_distances(adj, src)
        by_distance: dict[int, list[str]] = {}
        for name, d in dist.items():
            if d > 0:
                by_distance.setdefault(d, []).append(name)
        target_d = min(by_distance, key=lambda d: (abs(d - hops), d))
        candidates = sorted(by_distance[target_d], key=order.__getitem__)
        dst = candidates[rng.randrange(len(candidates))]
        flows.append(Flow(src, dst, shortest_path(adj, src, dst),
                          demand_end, demand_mid))
    return flows


def end_to_end_flow(spec: NetworkSpec, demand_end: int = END_DEMAND,
                    demand_mid: int = MID_DEMAND) -> list[Flow]:
    """The single first-to-last-router flow used by chain benchmarks."""
    adj = spec.adjacency()
    src, dst = spec.routers[0], spec.routers[-1]
    return [Flow(src, dst, shortest_path(adj, src, dst), demand_end, demand_mid)]


# -- partitioning -------------------------------------------------------------


@dataclass
class PartitionMap:
    """Router -> worker assignment over ``p`` workers."""

    assignment: dict[str, int]
    p: int

    def worker_of(self, router: str) -> int:
        return self.assignment[router]

    def blocks(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.p)]
        for router, worker in self.assignment.items():
            out[worker].append(router)
        return out

    def validate(self, spec: NetworkSpec) -> None:
        missing = [r for r in spec.routers if r not in self.assignment]
        if missing:
            raise IndivisiblePartition(f"routers without a worker: {missing}")
        extra = [r for r in self.assignment if r not in set(spec.routers)]
        if extra:
            raise IndivisiblePartition(f"assignment covers unknown routers: {extra}")
        workers = set(self.assignment.values())
        if not workers <= set(range(self.p)):
            raise IndivisiblePartition(
                f"worker ids {sorted(workers)} outside 0..{self.p - 1}")
        sizes = [len(block) for block in self.blocks()]
        if sizes and max(sizes) - min(sizes) > 1:
            raise IndivisiblePartition(f"uneven blocks: sizes {sizes}")

    def as_dict(self) -> dict:
        return {"p": self.p, "assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionMap":
        return cls({k: int(v) for k, v in data["assignment"].items()},
                   int(data["p"]))


def partition_blocks(spec: NetworkSpec, p: int) -> PartitionMap:
    """Consecutive near-equal blocks in router index order."""
    n = len(spec.routers)
    if not 1 <= p <= n:
        raise IndivisiblePartition(f"{p} workers for {n} routers")
    assignment: dict[str, int] = {}
    start = 0
    for worker in range(p):
        size = n // p + (1 if worker < n % p else 0)
        for name in spec.routers[start:start + size]:
            assignment[name] = worker
        start += size
    return PartitionMap(assignment, p)


def partition_caveman(spec: NetworkSpec, p: int) -> PartitionMap:
    """Whole neighboring caves per worker; cave count must divide evenly."""
    if not spec.groups:
        raise IndivisiblePartition("network has no cave structure")
    n_caves = len(spec.groups)
    if not 1 <= p <= n_caves or n_caves % p != 0:
        raise IndivisiblePartition(f"{p} workers cannot take {n_caves} caves evenly")
    per = n_caves // p
    assignment: dict[str, int] = {}
    for idx, cave in enumerate(spec.groups):
        for name in cave:
            assignment[name] = idx // per
    return PartitionMap(assignment, p)


def memory_loads(spec: NetworkSpec, flows: list[Flow],
                 pmap: PartitionMap) -> list[int]:
    """Per-worker totals of flow memory demand."""
    loads = [0] * pmap.p
    for flow in flows:
        for router in flow.path:
            loads[pmap.worker_of(router)] += flow.demand_at(router)
    return loads


def energy(spec: NetworkSpec, flows: list[Flow], pmap: PartitionMap,
           kind: str) -> float:
    """Partition cost: P1 cross flows, P2 cross links, P3 load imbalance.

    P1 counts each flow once no matter how many times its path changes
    workers.  P3 is the coefficient of variation (population std over mean)
    of per-worker memory demand, zero when demand is spread evenly.
    """
    if kind == "P1":
        crossing = 0
        for flow in flows:
            workers = {pmap.worker_of(router) for router in flow.path}
            if len(workers) > 1:
                crossing += 1
        return float(crossing)
    if kind == "P2":
        return float(sum(1 for a, b, _l in spec.qlinks
                         if pmap.worker_of(a) != pmap.worker_of(b)))
    if kind == "P3":
        loads = memory_loads(spec, flows, pmap)
        mean = sum(loads) / len(loads)
        if mean == 0:
            return 0.0
        variance = sum((x - mean) ** 2 for x in loads) / len(loads)
        return math.sqrt(variance) / mean
    raise ValueError(f"unknown energy kind {kind!r}; expected one of {ENERGY_KINDS}")


@dataclass
class AnnealConfig:
    """Simulated-annealing schedule.

    ``t0=None`` starts at the initial state's energy (1.0 when that is zero),
    which normalizes acceptance odds across the three energy scales.
    """

    iterations: int = 10_000
    t0: float | None = None
    cooling: float = 0.995
    seed: int = 0
    kind: str = "P2"

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not 0.0 < self.cooling < 1.0:
            raise ValueError(f"cooling must be in (0, 1), got {self.cooling}")
        if self.kind not in ENERGY_KINDS:
            raise ValueError(f"unknown energy kind {self.kind!r}")


def anneal_partition(spec: NetworkSpec, flows: list[Flow], p: int,
                     config: AnnealConfig) -> PartitionMap:
    """Metropolis search over even partitions, swapping router pairs.

    Starts from the block partition; every move swaps two routers on
    different workers, so block sizes never change.  Returns the best state
    seen, which can only improve on the start.
    """
    current = partition_blocks(spec, p)
    if p == 1:
        return current
    rng = random.Random(config.seed)
    routers = spec.routers
    assignment = current.assignment
    e_now = energy(spec, flows, current, config.kind)
    best = dict(assignment)
    e_best = e_now
    temperature = config.t0 if config.t0 is not None else (e_now or 1.0)
    for _step in range(config.iterations):
        a = routers[rng.randrange(len(routers))]
        b = routers[rng.randrange(len(routers))]
        if assignment[a] == assignment[b]:
            temperature *= config.cooling
            continue
        assignment[a], assignment[b] = assignment[b], assignment[a]
        e_new = energy(spec, flows, current, config.kind)
        accept = (e_new <= e_now or
                  (temperature > 0 and
                   rng.random() < math.exp((e_now - e_new) / temperature)))
        if accept:
            e_now = e_new
            if e_new < e_best:
                e_best = e_new
                best = dict(assignment)
        else:
            assignment[a], assignment[b] = assignment[b], assignment[a]
        temperature *= config.cooling
    return PartitionMap(best, p)
