"""Traffic equations, folding check and utilization profile."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .network import AmodNetwork, RoutingMatrix, switch_probabilities

RESIDUAL_TOL = 1e-9


class TrafficSolveError(RuntimeError):
    pass


class ReducibleChainError(TrafficSolveError):
    pass


@dataclass
class NetworkSolution:
    """Relative throughputs ``pi[i, k]`` per queue and class.

    Scaled so that the first station's total throughput equals its total
    demand rate.
    """

    pi: np.ndarray
    base_rate: np.ndarray  # mu_i: total demand rate for stations, 1/T for roads
    is_station: np.ndarray
    residual: float = 0.0

    @property
    def total(self) -> np.ndarray:
        return self.pi.sum(axis=1)

    @property
    def gamma(self) -> np.ndarray:
        return self.total / self.base_rate

    def scaled(self, c: float) -> "NetworkSolution":
        return NetworkSolution(self.pi * c, self.base_rate, self.is_station, self.residual)


def base_rates(network: AmodNetwork) -> np.ndarray:
    mu = network.station_rates
    roads = ~network.is_station
    mu[roads] = 1.0 / network.travel_times[roads]
    return mu


def fixed_point_residual(P: sp.spmatrix, x: np.ndarray) -> float:
    scale = np.abs(x).max()
    if scale == 0:
        return np.inf
    return float(np.abs(P.T @ x - x).max() / scale)


def _power_iteration(P, x0, tol=1e-13, max_iter=200_000):
    # lazy chain avoids periodicity
    x = x0 / x0.sum()
    PT = P.T.tocsr()
    for _ in range(max_iter):
        y = 0.5 * (x + PT @ x)
        y /= y.sum()
        if np.abs(y - x).max() < tol * np.abs(y).max():
            return y
        x = y
    return x


def solve_traffic_equations(matrix: RoutingMatrix, network: AmodNetwork) -> NetworkSolution:
    """Left fixed point of the routing matrix, normalized on the first station."""
    P = matrix.P.tocsr()
    n = P.shape[0]
    n_comp, _ = connected_components(P, directed=True, connection="strong")
    if n_comp != 1:
        raise ReducibleChainError(f"routing chain on reachable states has {n_comp} strongly connected components")

    states = matrix.states
    ref_station = 0
    lam_ref = network.station_rates[ref_station]
    ref_mask = states[:, 0] == ref_station
    if not ref_mask.any():
        raise TrafficSolveError("first station is not reachable by the routing chain")

    A = (P.T - sp.identity(n, format="csr")).tolil()
    drop = int(np.flatnonzero(ref_mask)[0])
    A[drop, :] = ref_mask.astype(float)
    A = A.tocsc()
    b = np.zeros(n)
    b[drop] = lam_ref
    x = spsolve(A, b)
    for _ in range(3):
        r = b - A @ x
        if np.abs(r).max() <= 1e-15 * max(1.0, np.abs(x).max()):
            break
        x = x + spsolve(A, r)
    res = fixed_point_residual(P, x) if np.all(np.isfinite(x)) else np.inf
    if not res <= RESIDUAL_TOL or (x < -1e-12 * np.abs(x).max()).any():
        y = _power_iteration(P, np.ones(n))
        y *= lam_ref / y[ref_mask].sum()
        res_y = fixed_point_residual(P, y)
        if not res_y <= RESIDUAL_TOL:
            raise TrafficSolveError(f"traffic equations unsolved: residual {min(res, res_y):.3e}")
        x, res = y, res_y
    x = np.clip(x, 0.0, None)

    pi = np.zeros((matrix.n_queues, matrix.n_classes))
    pi[states[:, 0], states[:, 1]] = x
    return NetworkSolution(pi, base_rates(network), network.is_station, res)


@dataclass
class FoldReport:
    max_abs: float
    max_rel: float
    per_station: np.ndarray


def fold_check(solution: NetworkSolution, network: AmodNetwork) -> FoldReport:
    """Station throughput versus the switch-weighted throughput of the origins
    of every class that terminates there."""
    table = switch_probabilities(network)
    total = solution.total
    origin = network.class_origin
    ptilde = np.zeros(network.n_classes)
    for ks, p in table.values():
        ptilde[ks] = p
    res = []
    for i in np.flatnonzero(network.is_station):
        folded = sum(ptilde[k] * total[origin[k]] for k in network.destination_classes(int(i)))
        res.append(total[i] - folded)
    res = np.abs(np.array(res))
    scale = max(np.abs(total).max(), 1e-300)
    return FoldReport(float(res.max()), float(res.max() / scale), res)


@dataclass
class UtilizationProfile:
    rho: np.ndarray  # per queue; zero on roads
    bottlenecks: np.ndarray  # station queue indices
    gamma_max: float


def utilization_profile(solution: NetworkSolution, network: AmodNetwork | None = None, tol: float = 1e-9):
    """Utilization factors normalized so the busiest station has rho = 1."""
    gamma = solution.gamma
    st = solution.is_station
    gmax = gamma[st].max() if st.any() else 0.0
    if not gmax > 0:
        raise TrafficSolveError("all stations have zero throughput")
    rho = np.where(st, gamma / gmax, 0.0)
    bott = np.flatnonzero(st & (rho >= 1.0 - tol))
    return UtilizationProfile(rho, bott, float(gmax))


def class_conservation_residual(solution: NetworkSolution, network: AmodNetwork, matrix: RoutingMatrix) -> float:
    """max_k |flow of class k entering t(k) - pi[s(k), k]|."""
    P = matrix.P.tocoo()
    st = matrix.states
    x = solution.pi[st[:, 0], st[:, 1]]
    dest = network.class_destination
    arriving = np.zeros(network.n_classes)
    for r, c, p in zip(P.row, P.col, P.data):
        i, k = st[r]
        j = st[c, 0]
        if j == dest[k] and i != j:
            arriving[k] += x[r] * p
    origin = network.class_origin
    leaving = solution.pi[origin, np.arange(network.n_classes)]
    return float(np.abs(arriving - leaving).max())
