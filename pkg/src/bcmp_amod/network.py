"""Road network, stations, demand classes and the BCMP routing matrix.

Queues are the edges of a directed graph over intersections.  Stations are
single-server (SS) queues with ``parent == child``; roads are infinite-server
(IS) queues.  Vehicles carry an origin-destination class and switch class
when they reach the destination station of their current class.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

SS = "SS"
IS = "IS"


class NetworkValidationError(ValueError):
    """Raised when a road graph, demand set or policy is malformed."""


@dataclass(frozen=True)
class Queue:
    id: str
    kind: str
    parent: str
    child: str
    T: float | None = None
    C: float | None = None

    @property
    def is_station(self) -> bool:
        return self.kind == SS


@dataclass(frozen=True)
class RoadGraph:
    vertices: tuple[str, ...]
    queues: tuple[Queue, ...]

    @classmethod
    def from_parts(cls, vertices, roads, stations) -> "RoadGraph":
        """Build from ``roads = [(id, parent, child, T, C)]`` and ``stations = [(id, vertex)]``."""
        qs = [Queue(str(sid), SS, str(v), str(v)) for sid, v in stations]
        qs += [Queue(str(rid), IS, str(a), str(b), float(T), float(C)) for rid, a, b, T, C in roads]
        return cls(tuple(str(v) for v in vertices), tuple(qs))


@dataclass(frozen=True)
class DemandClass:
    origin: str
    destination: str
    rate: float
    rebalancing: bool = False

    @property
    def pair(self) -> tuple[str, str]:
        return (self.origin, self.destination)


@dataclass(frozen=True)
class DemandSet:
    """Customer tuples ``(s, t, rate)`` plus optional rebalancing pairs.

    ``rebalancing_pairs=None`` means every ordered station pair.
    """

    customers: tuple[tuple[str, str, float], ...]
    rebalancing_pairs: tuple[tuple[str, str], ...] | None = None
    rebalancing_rates: Mapping[tuple[str, str], float] | None = None


@dataclass(frozen=True, eq=False)
class AmodNetwork:
    vertices: tuple[str, ...]
    queues: tuple[Queue, ...]
    classes: tuple[DemandClass, ...]
    # derived lookups
    queue_index: dict = field(repr=False)
    class_index: dict = field(repr=False)
    station_at: dict = field(repr=False)
    out_roads: dict = field(repr=False)
    in_roads: dict = field(repr=False)

    @property
    def n_queues(self) -> int:
        return len(self.queues)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_stations(self) -> int:
        return sum(q.is_station for q in self.queues)

    @property
    def station_ids(self) -> list[str]:
        return [q.id for q in self.queues if q.is_station]

    @property
    def road_indices(self) -> np.ndarray:
        return np.array([i for i, q in enumerate(self.queues) if not q.is_station], dtype=np.int64)

    @property
    def is_station(self) -> np.ndarray:
        return np.array([q.is_station for q in self.queues])

    @property
    def travel_times(self) -> np.ndarray:
        """T_i per queue, NaN for stations."""
        return np.array([np.nan if q.is_station else q.T for q in self.queues])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([np.nan if q.is_station else q.C for q in self.queues])

    @property
    def class_rates(self) -> np.ndarray:
        return np.array([c.rate for c in self.classes])

    @property
    def class_origin(self) -> np.ndarray:
        """Station queue index of s(k) per class."""
        return np.array([self.queue_index[c.origin] for c in self.classes], dtype=np.int64)

    @property
    def class_destination(self) -> np.ndarray:
        return np.array([self.queue_index[c.destination] for c in self.classes], dtype=np.int64)

    @property
    def is_rebalancing(self) -> np.ndarray:
        return np.array([c.rebalancing for c in self.classes])

    def origin_classes(self, station: int) -> list[int]:
        sid = self.queues[station].id
        return [k for k, c in enumerate(self.classes) if c.origin == sid]

    def destination_classes(self, station: int) -> list[int]:
        sid = self.queues[station].id
        return [k for k, c in enumerate(self.classes) if c.destination == sid]

    @property
    def station_rates(self) -> np.ndarray:
        """Total (real + virtual) demand rate leaving each station queue; zero on roads."""
        out = np.zeros(self.n_queues)
        for c in self.classes:
            out[self.queue_index[c.origin]] += c.rate
        return out

    def vertex_of_station(self, station: int) -> str:
        return self.queues[station].parent

    def with_rebalancing_rates(self, rates: Mapping[tuple[str, str], float]) -> "AmodNetwork":
        """Copy with rebalancing class rates replaced (pairs not listed get 0)."""
        classes = []
        for c in self.classes:
            if c.rebalancing:
                r = float(rates.get(c.pair, 0.0))
                if r < 0 or not np.isfinite(r):
                    raise NetworkValidationError(f"invalid rebalancing rate {r} for pair {c.pair}")
                c = DemandClass(c.origin, c.destination, r, True)
            classes.append(c)
        return _assemble(self.vertices, self.queues, classes)

    def rebalancing_rates(self) -> dict[tuple[str, str], float]:
        return {c.pair: c.rate for c in self.classes if c.rebalancing}

    def __repr__(self) -> str:
        return (f"AmodNetwork(vertices={len(self.vertices)}, stations={self.n_stations}, "
                f"roads={self.n_queues - self.n_stations}, classes={self.n_classes})")


def _assemble(vertices, queues, classes) -> AmodNetwork:
    queue_index = {q.id: i for i, q in enumerate(queues)}
    class_index = {(c.origin, c.destination, c.rebalancing): k for k, c in enumerate(classes)}
    station_at = {q.parent: i for i, q in enumerate(queues) if q.is_station}
    out_roads = {v: [] for v in vertices}
    in_roads = {v: [] for v in vertices}
    for i, q in enumerate(queues):
        if not q.is_station:
            out_roads[q.parent].append(i)
            in_roads[q.child].append(i)
    return AmodNetwork(
        tuple(vertices), tuple(queues), tuple(classes),
        queue_index=queue_index, class_index=class_index, station_at=station_at,
        out_roads={v: tuple(r) for v, r in out_roads.items()},
        in_roads={v: tuple(r) for v, r in in_roads.items()},
    )


def _validate_graph(graph: RoadGraph, allow_self_loops: bool = False) -> None:
    vset = set(graph.vertices)
    if len(vset) != len(graph.vertices):
        raise NetworkValidationError("duplicate vertex ids")
    seen_ids = set()
    station_vertex = {}
    for q in graph.queues:
        if q.id in seen_ids:
            raise NetworkValidationError(f"duplicate queue id {q.id!r}")
        seen_ids.add(q.id)
        if q.parent not in vset or q.child not in vset:
            raise NetworkValidationError(f"queue {q.id!r} references an unknown vertex")
        if q.kind == SS:
            if q.parent != q.child:
                raise NetworkValidationError(f"station {q.id!r} must have parent == child")
            if q.T is not None or q.C is not None:
                raise NetworkValidationError(f"station {q.id!r} cannot carry T or C")
            if q.parent in station_vertex:
                raise NetworkValidationError(
                    f"vertex {q.parent!r} hosts two stations: {station_vertex[q.parent]!r} and {q.id!r}")
            station_vertex[q.parent] = q.id
        elif q.kind == IS:
            if q.parent == q.child and not allow_self_loops:
                raise NetworkValidationError(f"road {q.id!r} is a self-loop")
            if q.T is None or q.C is None or not (q.T > 0) or not (q.C > 0):
                raise NetworkValidationError(f"road {q.id!r} needs T > 0 and C > 0")
            if not (np.isfinite(q.T) and np.isfinite(q.C)):
                raise NetworkValidationError(f"road {q.id!r} has non-finite T or C")
        else:
            raise NetworkValidationError(f"queue {q.id!r} has unknown kind {q.kind!r}")


def _reachable_vertices(start: str, adj: Mapping[str, list[str]]) -> set[str]:
    seen = {start}
    todo = deque([start])
    while todo:
        v = todo.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return seen


def build_network(graph: RoadGraph, demands: DemandSet) -> AmodNetwork:
    """Validate the graph and demands and build the class set.

    Queues are ordered stations first, then roads, each by id; classes are
    ordered customers first, then rebalancing, each by (origin, destination).
    """
    _validate_graph(graph)
    stations = sorted((q for q in graph.queues if q.is_station), key=lambda q: q.id)
    roads = sorted((q for q in graph.queues if not q.is_station), key=lambda q: q.id)
    if not stations:
        raise NetworkValidationError("network has no stations")
    queues = stations + roads
    station_ids = {q.id for q in stations}
    vertices = sorted(graph.vertices)

    adj = {v: [] for v in vertices}
    for q in roads:
        adj[q.parent].append(q.child)
    for a in stations:
        reach = _reachable_vertices(a.parent, adj)
        for b in stations:
            if b.parent not in reach:
                raise NetworkValidationError(f"station {b.id} cannot be reached from station {a.id}")

    customers = {}
    for s, t, lam in demands.customers:
        s, t, lam = str(s), str(t), float(lam)
        for end in (s, t):
            if end not in station_ids:
                raise NetworkValidationError(f"demand endpoint {end!r} in ({s}, {t}, {lam}) is not a station")
        if s == t:
            raise NetworkValidationError(f"demand ({s}, {t}, {lam}) has identical endpoints")
        if not (np.isfinite(lam) and lam > 0):
            raise NetworkValidationError(f"demand ({s}, {t}, {lam}) needs a finite positive rate")
        if (s, t) in customers:
            raise NetworkValidationError(f"duplicate demand pair ({s}, {t})")
        customers[(s, t)] = lam

    if demands.rebalancing_pairs is None:
        pairs = [(a.id, b.id) for a in stations for b in stations if a.id != b.id]
    else:
        pairs = []
        for s, t in demands.rebalancing_pairs:
            s, t = str(s), str(t)
            if s not in station_ids or t not in station_ids:
                raise NetworkValidationError(f"rebalancing pair ({s}, {t}) references a non-station")
            if s == t:
                raise NetworkValidationError(f"rebalancing pair ({s}, {t}) has identical endpoints")
            pairs.append((s, t))
        if len(set(pairs)) != len(pairs):
            raise NetworkValidationError("duplicate rebalancing pair")
    rates = dict(demands.rebalancing_rates or {})
    unknown = set(rates) - set(pairs)
    if unknown:
        raise NetworkValidationError(f"rebalancing rate given for undeclared pair(s) {sorted(unknown)}")

    classes = [DemandClass(s, t, lam) for (s, t), lam in sorted(customers.items())]
    classes += [DemandClass(s, t, float(rates.get((s, t), 0.0)), True) for s, t in sorted(pairs)]
    for c in classes:
        if c.rate < 0 or not np.isfinite(c.rate):
            raise NetworkValidationError(f"invalid rate for class {c}")
    return _assemble(vertices, queues, classes)


def switch_probabilities(network: AmodNetwork) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Class-switch table per station: ``{station: (class indices, probabilities)}``.

    Probabilities are ``rate_k / total_rate`` over the classes leaving the
    station; the last positive entry is closed to the residual so each row
    sums to 1 and zero-rate classes keep probability exactly 0.
    """
    table = {}
    rates = network.class_rates
    for i, q in enumerate(network.queues):
        if not q.is_station:
            continue
        ks = np.array(network.origin_classes(i), dtype=np.int64)
        total = rates[ks].sum() if len(ks) else 0.0
        if not total > 0:
            raise NetworkValidationError(f"station {q.id} has zero total outgoing demand")
        p = rates[ks] / total
        last = np.flatnonzero(p > 0)[-1]
        p[last] = 0.0
        p[last] = 1.0 - p.sum()
        table[i] = (ks, p)
    return table


@dataclass
class RoutingPolicy:
    """Per (queue, class) distribution over the roads leaving ``child(queue)``.

    ``alpha[(i, k)] = {j: probability}`` with queue indices of the network.
    """

    alpha: dict[tuple[int, int], dict[int, float]]

    def get(self, i: int, k: int) -> dict[int, float] | None:
        return self.alpha.get((i, k))

    def validate(self, network: AmodNetwork, atol: float = 1e-12) -> None:
        for (i, k), dist in self.alpha.items():
            allowed = set(network.out_roads[network.queues[i].child])
            bad = set(dist) - allowed
            if bad:
                raise NetworkValidationError(
                    f"policy for state ({network.queues[i].id}, class {k}) puts mass on "
                    f"{[network.queues[j].id for j in sorted(bad)]}, which do not leave {network.queues[i].child}")
            vals = np.array(list(dist.values()), dtype=float)
            if (vals < 0).any():
                raise NetworkValidationError(f"negative routing probability at ({i}, {k})")
            if abs(vals.sum() - 1.0) > atol:
                raise NetworkValidationError(f"routing probabilities at ({i}, {k}) sum to {vals.sum()!r}")

    @classmethod
    def from_vertex_rules(cls, network: AmodNetwork, rules: Mapping[tuple[str, int], Mapping[int, float]]):
        """Expand vertex-level rules ``{(vertex, k): {road: p}}`` to every queue entering that vertex."""
        alpha = {}
        for (v, k), dist in rules.items():
            entering = list(network.in_roads[v])
            if v in network.station_at:
                entering.append(network.station_at[v])
            for i in entering:
                alpha[(i, k)] = dict(dist)
        return cls(alpha)

    def to_document(self, network: AmodNetwork) -> dict:
        rows = []
        for (i, k), dist in sorted(self.alpha.items()):
            c = network.classes[k]
            rows.append({
                "queue": network.queues[i].id,
                "class": [c.origin, c.destination, "rebalancing" if c.rebalancing else "customer"],
                "next": {network.queues[j].id: float(p) for j, p in sorted(dist.items())},
            })
        return {"alpha": rows}

    @classmethod
    def from_document(cls, network: AmodNetwork, doc: Mapping) -> "RoutingPolicy":
        alpha = {}
        try:
            for row in doc["alpha"]:
                s, t, kind = row["class"]
                k = network.class_index[(s, t, kind == "rebalancing")]
                i = network.queue_index[row["queue"]]
                alpha[(i, k)] = {network.queue_index[j]: float(p) for j, p in row["next"].items()}
        except (KeyError, ValueError, TypeError) as exc:
            raise NetworkValidationError(f"malformed policy document: {exc!r}") from exc
        return cls(alpha)


def shortest_path_policy(network: AmodNetwork) -> RoutingPolicy:
    """Deterministic free-flow shortest-path routing for every class.

    Ties are broken by the lowest road index.
    """
    T = network.travel_times
    rules = {}
    for k, c in enumerate(network.classes):
        target = network.vertex_of_station(network.queue_index[c.destination])
        dist = _distances_to(network, target, T)
        for v in network.vertices:
            if v == target or not network.out_roads[v]:
                continue
            best = min(network.out_roads[v], key=lambda j: (T[j] + dist[network.queues[j].child], j))
            if np.isfinite(dist[network.queues[best].child]):
                rules[(v, k)] = {best: 1.0}
    return RoutingPolicy.from_vertex_rules(network, rules)


def _distances_to(network: AmodNetwork, target: str, T: np.ndarray) -> dict[str, float]:
    dist = {v: np.inf for v in network.vertices}
    dist[target] = 0.0
    heap = [(0.0, target)]
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for j in network.in_roads[v]:
            u = network.queues[j].parent
            nd = d + T[j]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    return dist


@dataclass
class RoutingMatrix:
    """Stochastic matrix over the reachable (queue, class) states."""

    P: sp.csr_matrix
    states: np.ndarray  # (n, 2): queue index, class index
    n_queues: int
    n_classes: int

    def state_lookup(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(k)): s for s, (i, k) in enumerate(self.states)}


def _successors(network, policy, switch, dest_station, i, k):
    v = network.queues[i].child
    t = dest_station[k]
    if network.station_at.get(v) == t:
        ks, p = switch[t]
        return [((t, int(kk)), float(pp)) for kk, pp in zip(ks, p) if pp > 0]
    dist = policy.get(i, k)
    if dist is None:
        return None
    return [((j, k), float(p)) for j, p in sorted(dist.items()) if p > 0]


def assemble_routing_matrix(network: AmodNetwork, policy: RoutingPolicy, atol: float = 1e-12) -> RoutingMatrix:
    """Routing matrix over states reachable from the class origins.

    A vehicle of class k continues on roads according to the policy until it
    reaches the vertex hosting station t(k); it then enters the station and
    switches to a class leaving that station with the station's switch
    probabilities.  Classes with zero rate are never entered.
    """
    policy.validate(network)
    switch = switch_probabilities(network)
    dest_station = network.class_destination

    starts = []
    for st, (ks, p) in switch.items():
        starts += [(st, int(k)) for k, pp in zip(ks, p) if pp > 0]
    index = {}
    order = []
    todo = deque()
    for s in starts:
        index[s] = len(order)
        order.append(s)
        todo.append(s)
    rows, cols, vals = [], [], []
    missing = []
    while todo:
        s = todo.popleft()
        succ = _successors(network, policy, switch, dest_station, *s)
        if succ is None:
            missing.append(s)
            continue
        for nxt, p in succ:
            if nxt not in index:
                index[nxt] = len(order)
                order.append(nxt)
                todo.append(nxt)
            rows.append(index[s])
            cols.append(index[nxt])
            vals.append(p)
    if missing:
        names = [(network.queues[i].id, network.classes[k].pair) for i, k in missing[:10]]
        raise NetworkValidationError(f"policy has no entry for reachable state(s) {names}")
    n = len(order)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    P.sum_duplicates()
    sums = np.asarray(P.sum(axis=1)).ravel()
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        i, k = order[bad[0]]
        raise NetworkValidationError(
            f"routing matrix row ({network.queues[i].id}, class {k}) sums to {sums[bad[0]]!r}")
    return RoutingMatrix(P, np.array(order, dtype=np.int64).reshape(n, 2), network.n_queues, network.n_classes)
