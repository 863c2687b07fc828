"""Asymptotically optimal routing and rebalancing as a multi-commodity flow LP.

Variables are class throughputs on road queues.  Each customer class is a
commodity with fixed divergence at its endpoints; each rebalancing pair is a
commodity whose rate is free but nonnegative; station balance ties them
together so every station ends up with equal utilization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaincc

from .analysis import mva_sweep
from .lp import LpInstance, solve_lp
from .network import AmodNetwork, NetworkValidationError, RoutingPolicy, assemble_routing_matrix
from .traffic import NetworkSolution, solve_traffic_equations

BASELINE = "baseline"
CONSERVATIVE = "conservative"
MODES = (BASELINE, CONSERVATIVE)
FEAS_TOL = 1e-7


class InfeasibleLPError(RuntimeError):
    def __init__(self, message, violated_rows=()):
        super().__init__(message)
        self.violated_rows = list(violated_rows)


def poisson_cdf(C: float, mean: float) -> float:
    """P(X <= floor(C)) for X ~ Poisson(mean), written as Q(floor(C + 1), mean)."""
    return float(gammaincc(np.floor(C + 1.0), mean))


def adjust_capacity(C: float, epsilon: float) -> float:
    """Poisson mean whose probability of exceeding C vehicles is exactly epsilon.

    Solves ``P(X <= floor(C)) = 1 - epsilon`` by bisection; the CDF is
    strictly decreasing in the mean.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    if C < 0:
        raise ValueError("capacity must be nonnegative")
    target = 1.0 - epsilon
    lo, hi = 0.0, max(1.0, C + 1.0)
    while poisson_cdf(C, hi) > target:
        hi *= 2.0
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if poisson_cdf(C, mid) > target:
            lo = mid
        else:
            hi = mid
    # pick the endpoint with the smaller residual
    c_hat = lo if abs(poisson_cdf(C, lo) - target) <= abs(poisson_cdf(C, hi) - target) else hi
    return c_hat


def capacity_bounds(network: AmodNetwork, mode: str = BASELINE, epsilon: float = 0.1) -> np.ndarray:
    """Right-hand side of the per-road load constraint, in road order."""
    C = network.capacities[network.road_indices]
    if mode == BASELINE:
        return C.copy()
    if mode == CONSERVATIVE:
        return np.array([adjust_capacity(c, epsilon) for c in C])
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class _Rows:
    def __init__(self, n_cols):
        self.n_cols = n_cols
        self.rows, self.cols, self.vals, self.rhs, self.labels = [], [], [], [], []

    def add(self, coeffs, rhs, label):
        r = len(self.rhs)
        for c, v in coeffs.items():
            if v != 0:
                self.rows.append(r)
                self.cols.append(c)
                self.vals.append(v)
        self.rhs.append(rhs)
        self.labels.append(label)

    def matrix(self):
        A = sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.rhs), self.n_cols))
        A.sum_duplicates()
        return A, np.array(self.rhs, dtype=float)


def _divergence(network, roads_pos, K, v, k):
    """Coefficients of (outflow - inflow) of class k at vertex v."""
    coeffs = {}
    for j in network.out_roads[v]:
        coeffs[roads_pos[j] * K + k] = coeffs.get(roads_pos[j] * K + k, 0.0) + 1.0
    for j in network.in_roads[v]:
        coeffs[roads_pos[j] * K + k] = coeffs.get(roads_pos[j] * K + k, 0.0) - 1.0
    return coeffs


def build_lp(network: AmodNetwork, mode: str = BASELINE, epsilon: float = 0.1) -> LpInstance:
    """Assemble the road-flow LP; variable ``r * K + k`` is class k on the r-th road."""
    roads = network.road_indices
    roads_pos = {int(j): r for r, j in enumerate(roads)}
    K = network.n_classes
    n = len(roads) * K
    T = network.travel_times[roads]
    bounds = capacity_bounds(network, mode, epsilon)
    classes = network.classes
    customers = [k for k, c in enumerate(classes) if not c.rebalancing]
    rebal = [k for k, c in enumerate(classes) if c.rebalancing]
    vertex = {k: (network.vertex_of_station(network.queue_index[c.origin]),
                  network.vertex_of_station(network.queue_index[c.destination]))
              for k, c in enumerate(classes)}

    c_vec = np.repeat(T, K)
    eq = _Rows(n)
    ub = _Rows(n)

    for i in np.flatnonzero(network.is_station):
        v = network.vertex_of_station(int(i))
        demand_div = 0.0
        coeffs = {}
        for q in customers:
            s, t = vertex[q]
            demand_div += classes[q].rate * ((v == s) - (v == t))
        for r in rebal:
            for col, val in _divergence(network, roads_pos, K, v, r).items():
                coeffs[col] = coeffs.get(col, 0.0) + val
        eq.add(coeffs, -demand_div, ("station_balance", network.queues[i].id))

    for r, j in enumerate(roads):
        ub.add({r * K + k: T[r] for k in range(K)}, bounds[r], ("capacity", network.queues[j].id))

    for q in customers:
        s, t = vertex[q]
        lam = classes[q].rate
        for v in network.vertices:
            d = lam if v == s else (-lam if v == t else 0.0)
            eq.add(_divergence(network, roads_pos, K, v, q), d, ("customer_conservation", q, v))

    for r in rebal:
        s, t = vertex[r]
        coeffs = _divergence(network, roads_pos, K, s, r)
        for col, val in _divergence(network, roads_pos, K, t, r).items():
            coeffs[col] = coeffs.get(col, 0.0) + val
        eq.add(coeffs, 0.0, ("rebalancing_antisymmetry", r))
        for v in network.vertices:
            if v not in (s, t):
                eq.add(_divergence(network, roads_pos, K, v, r), 0.0, ("rebalancing_conservation", r, v))
        neg = {col: -val for col, val in _divergence(network, roads_pos, K, s, r).items()}
        ub.add(neg, 0.0, ("rebalancing_nonnegative", r))

    A_eq, b_eq = eq.matrix()
    A_ub, b_ub = ub.matrix()
    var_labels = [(network.queues[j].id, k) for j in roads for k in range(K)]
    return LpInstance(c_vec, A_ub, b_ub, A_eq, b_eq, var_labels, ub.labels, eq.labels)


@dataclass
class FlowSolution:
    flows: np.ndarray  # (n_queues, n_classes); station rows hold the class rates at their origin
    rebalancing_rates: dict
    objective: float
    loads: np.ndarray  # T_i * total flow per road, road order
    capacity_bounds: np.ndarray
    status: str
    mode: str
    epsilon: float
    network: AmodNetwork  # network with the recovered rebalancing rates

    @property
    def binding(self) -> np.ndarray:
        """Road positions whose load sits on its capacity bound."""
        return np.flatnonzero(self.loads >= self.capacity_bounds - FEAS_TOL * np.maximum(1.0, self.capacity_bounds))


def _find_cycle(heads, tails, active):
    """Return the arc list of one directed cycle among active arcs, or None."""
    out = {}
    for a in np.flatnonzero(active):
        out.setdefault(tails[a], []).append(a)
    color = {}
    for root in sorted(out):
        if color.get(root):
            continue
        stack = [(root, iter(out.get(root, ())))]
        path_arcs = []
        color[root] = 1
        while stack:
            v, it = stack[-1]
            a = next(it, None)
            if a is None:
                color[v] = 2
                stack.pop()
                if path_arcs:
                    path_arcs.pop()
                continue
            w = heads[a]
            c = color.get(w, 0)
            if c == 0:
                color[w] = 1
                path_arcs.append(a)
                stack.append((w, iter(out.get(w, ()))))
            elif c == 1:
                cyc = [a]
                for b in reversed(path_arcs):
                    cyc.append(b)
                    if tails[b] == w:
                        break
                return cyc[::-1]
    return None


def strip_cycles(network: AmodNetwork, road_flow: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Cancel directed flow cycles of a single commodity (road order)."""
    roads = network.road_indices
    tails = [network.queues[j].parent for j in roads]
    heads = [network.queues[j].child for j in roads]
    f = road_flow.astype(float).copy()
    scale = max(f.max(initial=0.0), 1.0)
    while True:
        f[f < tol * scale] = 0.0
        cyc = _find_cycle(heads, tails, f > 0)
        if cyc is None:
            return f
        f[cyc] -= f[cyc].min()


def _net_outflow(network, road_flow, v):
    pos = {int(j): r for r, j in enumerate(network.road_indices)}
    return (sum(road_flow[pos[j]] for j in network.out_roads[v])
            - sum(road_flow[pos[j]] for j in network.in_roads[v]))


def _elastic_violations(inst: LpInstance, backend: str):
    """Phase-1 style LP with an overflow variable on every capacity row."""
    cap_rows = [r for r, lab in enumerate(inst.ub_labels) if lab[0] == "capacity"]
    n = inst.n_vars
    extra = sp.csr_matrix(
        (-np.ones(len(cap_rows)), (cap_rows, np.arange(len(cap_rows)))),
        shape=(inst.A_ub.shape[0], len(cap_rows)))
    elastic = LpInstance(
        np.r_[np.zeros(n), np.ones(len(cap_rows))],
        sp.hstack([inst.A_ub, extra]).tocsr(), inst.b_ub,
        sp.hstack([inst.A_eq, sp.csr_matrix((inst.A_eq.shape[0], len(cap_rows)))]).tocsr(), inst.b_eq)
    res = solve_lp(elastic, backend)
    if res.status != "optimal":
        return []
    over = res.x[n:]
    return [(inst.ub_labels[cap_rows[i]][1], float(over[i])) for i in np.flatnonzero(over > FEAS_TOL)]


def solve_a_oscarr(network: AmodNetwork, mode: str = BASELINE, epsilon: float = 0.1,
                   backend: str = "highs") -> FlowSolution:
    """Solve the LP, strip degenerate cycles and recover rebalancing rates."""
    inst = build_lp(network, mode, epsilon)
    res = solve_lp(inst, backend)
    if res.status == "infeasible":
        viol = _elastic_violations(inst, backend)
        names = ", ".join(f"{road} (+{amt:.4g})" for road, amt in viol) or "none identified"
        raise InfeasibleLPError(f"capacities cannot carry the demand; overloaded roads: {names}", viol)
    if res.status == "unbounded":
        raise RuntimeError("internal error: flow LP reported unbounded")
    if res.status != "optimal":
        raise RuntimeError(f"LP solver failed: {res.message}")

    roads = network.road_indices
    K = network.n_classes
    x = res.x.reshape(len(roads), K)
    for k in range(K):
        x[:, k] = strip_cycles(network, x[:, k])

    rates = {}
    for k, c in enumerate(network.classes):
        if c.rebalancing:
            s = network.vertex_of_station(network.queue_index[c.origin])
            r = _net_outflow(network, x[:, k], s)
            rates[c.pair] = max(float(r), 0.0)
    net = network.with_rebalancing_rates(rates)
    flows = np.zeros((network.n_queues, K))
    flows[roads] = x
    flows[net.class_origin, np.arange(K)] = net.class_rates
    T = network.travel_times[roads]
    loads = T * x.sum(axis=1)
    objective = float(loads.sum())
    bounds = capacity_bounds(network, mode, epsilon)
    viol = inst.violation(res.x)
    if max(viol.values()) > FEAS_TOL * max(1.0, np.abs(inst.b_eq).max(initial=1.0)):
        raise RuntimeError(f"LP solution violates constraints: {viol}")
    return FlowSolution(flows, rates, objective, loads, bounds, res.status, mode, epsilon, net)


@dataclass
class BalanceReport:
    max_residual: float
    per_station: np.ndarray


def verify_balance(flows: FlowSolution, network: AmodNetwork | None = None) -> BalanceReport:
    """Total rate leaving each station versus the rates of the classes ending there."""
    net = flows.network if network is None else network.with_rebalancing_rates(flows.rebalancing_rates)
    rates = net.class_rates
    out = []
    for i in np.flatnonzero(net.is_station):
        leaving = rates[net.origin_classes(int(i))].sum()
        arriving = rates[net.destination_classes(int(i))].sum()
        out.append(leaving - arriving)
    res = np.abs(np.array(out))
    return BalanceReport(float(res.max()), res)


def decompose_to_policy(flows: FlowSolution, network: AmodNetwork | None = None,
                        tol: float = FEAS_TOL) -> RoutingPolicy:
    """Proportional splitting of each class's acyclic flow at every vertex."""
    net = flows.network if network is None else network.with_rebalancing_rates(flows.rebalancing_rates)
    roads = net.road_indices
    rules = {}
    for k, c in enumerate(net.classes):
        lam = c.rate
        if not lam > 0:
            continue
        s = net.vertex_of_station(net.queue_index[c.origin])
        t = net.vertex_of_station(net.queue_index[c.destination])
        f = flows.flows[roads, k]
        for v in net.vertices:
            d = _net_outflow(net, f, v)
            want = lam if v == s else (-lam if v == t else 0.0)
            if abs(d - want) > tol * max(1.0, lam):
                raise NetworkValidationError(
                    f"class {c.pair} violates flow conservation at vertex {v}: {d!r} vs {want!r}")
        f = strip_cycles(net, f)
        pos = {int(j): r for r, j in enumerate(roads)}
        for v in net.vertices:
            outs = [j for j in net.out_roads[v] if f[pos[j]] > 0]
            total = sum(f[pos[j]] for j in outs)
            if total > 0 and v != t:
                rules[(v, k)] = {j: f[pos[j]] / total for j in outs}
    return RoutingPolicy.from_vertex_rules(net, rules)


def analyze_policy(network: AmodNetwork, policy: RoutingPolicy) -> NetworkSolution:
    return solve_traffic_equations(assemble_routing_matrix(network, policy), network)


@dataclass
class GapCurve:
    m: np.ndarray
    g_ratio: np.ndarray
    scaled_objective: np.ndarray
    objective: float


def finite_m_gap(network: AmodNetwork, policy: RoutingPolicy, m_values) -> GapCurve:
    """G(m-1)/G(m) times the asymptotic road-vehicle count, per fleet size."""
    sol = analyze_policy(network, policy)
    m_values = np.asarray(list(m_values), dtype=np.int64)
    sweep = mva_sweep(sol, int(m_values.max()))
    roads = network.road_indices
    objective = float(network.travel_times[roads] @ sol.total[roads])
    ratio = sweep.X[m_values]
    return GapCurve(m_values, ratio, ratio * objective, objective)
