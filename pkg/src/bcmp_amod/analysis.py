"""Finite-fleet and asymptotic performance metrics of the closed network.

Everything here works on the single-class compression of the network: a
vector of relative utilizations ``gamma`` and a flag per queue telling
single-server stations from infinite-server roads.  Per-class figures are
recovered by scaling with ``pi[i, k] / pi[i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import gammaln

from .kernels import convolve_constants, mva_recursion
from .network import AmodNetwork
from .traffic import NetworkSolution, UtilizationProfile

MAX_STATES = 1_000_000


@dataclass
class ProductFormModel:
    """Relative throughputs and base service rates of each queue."""

    pi: np.ndarray
    base_rate: np.ndarray
    is_station: np.ndarray
    pi_class: np.ndarray | None = None

    @property
    def gamma(self) -> np.ndarray:
        return self.pi / self.base_rate

    @property
    def n_queues(self) -> int:
        return len(self.pi)

    @classmethod
    def from_solution(cls, solution: NetworkSolution) -> "ProductFormModel":
        return cls(solution.total, solution.base_rate, solution.is_station, solution.pi)

    @classmethod
    def from_gamma(cls, gamma, is_station) -> "ProductFormModel":
        gamma = np.asarray(gamma, dtype=float)
        return cls(gamma.copy(), np.ones_like(gamma), np.asarray(is_station, dtype=bool))


def _as_model(obj) -> ProductFormModel:
    if isinstance(obj, ProductFormModel):
        return obj
    if isinstance(obj, NetworkSolution):
        return ProductFormModel.from_solution(obj)
    raise TypeError(f"expected ProductFormModel or NetworkSolution, got {type(obj).__name__}")


@dataclass
class NormalizingConstants:
    """``log G(n)`` for n = 0..m; ratios never leave the log domain."""

    log_G: np.ndarray

    def log(self, n: int) -> float:
        return float(self.log_G[n])

    def ratio(self, n: int) -> float:
        """G(n-1) / G(n)."""
        return math.exp(self.log_G[n - 1] - self.log_G[n])

    def values(self) -> np.ndarray:
        top = float(np.max(self.log_G))
        if top > _LOG_MAX:
            raise OverflowError(f"G(n) reaches 10^{top / math.log(10):.1f}, beyond float64")
        return np.exp(self.log_G)


_LOG_MAX = math.log(np.finfo(float).max)


def convolution_G(gamma, is_station, m: int) -> NormalizingConstants:
    """Normalizing constants G(0..m) by sequential convolution over queues."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0:
        raise ValueError("need at least one queue")
    if (gamma < 0).any() or not np.all(np.isfinite(gamma)):
        raise ValueError("utilizations must be finite and nonnegative")
    if m < 0:
        raise ValueError("fleet size must be nonnegative")
    return NormalizingConstants(convolve_constants(gamma, is_station, m))


@dataclass
class PerformanceReport:
    m: int
    throughput: np.ndarray
    queue_length: np.ndarray
    availability: np.ndarray  # per queue, NaN on roads
    g_ratio: float
    throughput_class: np.ndarray | None = None
    queue_length_class: np.ndarray | None = None


@dataclass
class MvaSweep:
    """MVA results for every population 0..m_max."""

    model: ProductFormModel
    X: np.ndarray
    L: np.ndarray

    def report(self, m: int) -> PerformanceReport:
        mdl = self.model
        x = self.X[m]
        lam = x * mdl.pi
        L = self.L[m].copy()
        avail = np.where(mdl.is_station, mdl.gamma * x, np.nan)
        lam_k = L_k = None
        if mdl.pi_class is not None:
            with np.errstate(invalid="ignore", divide="ignore"):
                share = np.where(mdl.pi[:, None] > 0, mdl.pi_class / mdl.pi[:, None], 0.0)
            lam_k = share * lam[:, None]
            L_k = share * L[:, None]
        return PerformanceReport(m, lam, L, avail, float(x), lam_k, L_k)

    @property
    def availability(self) -> np.ndarray:
        """(m_max + 1, n_stations) availabilities."""
        st = self.model.is_station
        return self.X[:, None] * self.model.gamma[st][None, :]


def mva_sweep(model, m_max: int) -> MvaSweep:
    mdl = _as_model(model)
    if m_max < 0:
        raise ValueError("fleet size must be nonnegative")
    X, L = mva_recursion(mdl.gamma, mdl.is_station, m_max)
    return MvaSweep(mdl, X, L)


def mva(model, m: int, network: AmodNetwork | None = None) -> PerformanceReport:
    """Exact MVA metrics at fleet size m.

    ``model`` is a NetworkSolution or ProductFormModel.  Throughputs are
    ``X(m) * pi_i`` with ``X(m) = G(m-1)/G(m)`` and availabilities are
    ``gamma_i * X(m)``.
    """
    mdl = _as_model(model)
    if network is not None and network.n_queues != mdl.n_queues:
        raise ValueError(f"solution has {mdl.n_queues} queues, network has {network.n_queues}")
    if m == 0:
        z = np.zeros(mdl.n_queues)
        return PerformanceReport(0, z, z.copy(), np.where(mdl.is_station, 0.0, np.nan), float("nan"))
    return mva_sweep(mdl, m).report(m)


def marginal_distribution(model, queue: int, m: int) -> np.ndarray:
    """P(x vehicles at ``queue``) for x = 0..m, via the complement convolution."""
    return marginal_table(model, queue, m)[m]


def marginal_table(model, queue: int, m_max: int) -> list[np.ndarray]:
    """Marginal laws of ``queue`` for every fleet size 0..m_max.

    Shares one full and one complement convolution across all sizes.
    """
    mdl = _as_model(model)
    if not 0 <= queue < mdl.n_queues:
        raise IndexError(f"queue {queue} out of range")
    if m_max < 0:
        raise ValueError("fleet size must be nonnegative")
    out = [np.array([1.0])]
    if m_max == 0:
        return out
    gamma = mdl.gamma
    full = convolution_G(gamma, mdl.is_station, m_max)
    keep = np.arange(mdl.n_queues) != queue
    if keep.any():
        rest = convolution_G(gamma[keep], mdl.is_station[keep], m_max)
    else:
        rest = NormalizingConstants(np.r_[0.0, np.full(m_max, -np.inf)])
    g = gamma[queue]
    x_all = np.arange(m_max + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.where(x_all > 0, x_all * np.log(g) if g > 0 else -np.inf, 0.0)
        if not mdl.is_station[queue]:
            logw = logw - gammaln(x_all + 1.0)
        rest_log = rest.log_G
    for m in range(1, m_max + 1):
        x = x_all[:m + 1]
        p = np.exp(logw[:m + 1] + rest_log[m - x] - full.log(m))
        p[~np.isfinite(p)] = 0.0
        out.append(p)
    return out


def distribution_moments(p: np.ndarray) -> tuple[float, float]:
    x = np.arange(len(p))
    mean = float(x @ p)
    return mean, float(((x - mean) ** 2) @ p)


@dataclass
class StateSpaceOracle:
    m: int
    states: np.ndarray
    weights: np.ndarray
    G: float
    G_prev: float
    marginals: np.ndarray  # (n_queues, m + 1)
    mean: np.ndarray
    availability: np.ndarray  # P(x_i >= 1); NaN on roads
    throughput: np.ndarray

    @property
    def g_ratio(self) -> float:
        return self.G_prev / self.G


def _compositions(m: int, n: int) -> np.ndarray:
    if n == 1:
        return np.array([[m]], dtype=np.int64)
    rows = []
    for bars in combinations(range(m + n - 1), n - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(m + n - 2 - prev)
        rows.append(row)
    return np.array(rows, dtype=np.int64).reshape(-1, n)


def _weights(states, gamma, is_station):
    w = np.ones(len(states))
    for i in range(states.shape[1]):
        x = states[:, i]
        wi = np.power(gamma[i], x.astype(float))
        if not is_station[i]:
            wi = wi / np.array([math.factorial(int(v)) for v in x], dtype=float)
        w *= wi
    return w


def brute_force_stationary(model, m: int) -> StateSpaceOracle:
    """Enumerate every placement of m vehicles and weight it by the product form."""
    mdl = _as_model(model)
    n = mdl.n_queues
    count = math.comb(m + n - 1, n - 1)
    if count > MAX_STATES:
        raise ValueError(f"state space has {count} states, above the {MAX_STATES} guard")
    gamma = mdl.gamma
    states = _compositions(m, n)
    w = _weights(states, gamma, mdl.is_station)
    G = float(w.sum())
    if m > 0:
        G_prev = float(_weights(_compositions(m - 1, n), gamma, mdl.is_station).sum())
    else:
        G_prev = float("nan")
    prob = w / G
    marg = np.zeros((n, m + 1))
    for i in range(n):
        marg[i] = np.bincount(states[:, i], weights=prob, minlength=m + 1)
    mean = marg @ np.arange(m + 1)
    avail = np.where(mdl.is_station, 1.0 - marg[:, 0], np.nan)
    thr = mdl.pi * (G_prev / G) if m > 0 else np.zeros(n)
    return StateSpaceOracle(m, states, w, G, G_prev, marg, mean, avail, thr)


def poisson_pmf(lam: float, xmax: int) -> np.ndarray:
    x = np.arange(xmax + 1)
    if lam == 0:
        return (x == 0).astype(float)
    return np.exp(x * math.log(lam) - lam - gammaln(x + 1.0))


@dataclass
class AsymptoticReport:
    bottlenecks: np.ndarray
    availability: np.ndarray  # limiting availability per queue (NaN on roads)
    rho: np.ndarray
    gamma: np.ndarray
    is_station: np.ndarray

    def limiting_pmf(self, queue: int, xmax: int) -> np.ndarray:
        """Limiting queue-length law: geometric for non-bottleneck stations,
        Poisson for roads."""
        if self.is_station[queue]:
            if queue in set(self.bottlenecks.tolist()):
                raise ValueError(f"queue {queue} is a bottleneck; its length diverges")
            r = self.rho[queue]
            return (1.0 - r) * r ** np.arange(xmax + 1)
        return poisson_pmf(self.gamma[queue], xmax)


def asymptotic_metrics(profile: UtilizationProfile, solution) -> AsymptoticReport:
    """Large-fleet limits: availability 1 on bottlenecks and rho_i elsewhere."""
    mdl = _as_model(solution)
    if len(profile.bottlenecks) == 0:
        raise ValueError("no bottleneck stations")
    st = mdl.is_station
    # roads are never bottlenecks; their limit law uses the gamma normalized
    # so that the busiest station has unit utilization
    gamma = mdl.gamma / profile.gamma_max
    avail = np.where(st, np.minimum(profile.rho, 1.0), np.nan)
    avail[profile.bottlenecks] = 1.0
    return AsymptoticReport(profile.bottlenecks, avail, profile.rho, gamma, st)


def bpr_time(T, x, C, delta: float = 0.15, beta: float = 3.0):
    """Travel time ``T * (1 + delta * (x / C) ** beta)``."""
    T, x, C = np.asarray(T, dtype=float), np.asarray(x, dtype=float), np.asarray(C, dtype=float)
    if (T <= 0).any() or (C <= 0).any() or (x < 0).any() or delta < 0 or beta < 0:
        raise ValueError("bpr_time needs T, C > 0 and nonnegative x, delta, beta")
    out = T * (1.0 + delta * (x / C) ** beta)
    return float(out) if out.ndim == 0 else out


def poisson_raw_moment(lam: float, beta: float, tail: float = 1e-12) -> float:
    """E[X**beta] for X ~ Poisson(lam)."""
    if lam < 0:
        raise ValueError("Poisson mean must be nonnegative")
    if lam == 0:
        return 1.0 if beta == 0 else 0.0
    if beta == 3:
        return lam ** 3 + 3 * lam ** 2 + lam
    # sum until the remaining mass beyond the mode is below the tail bound
    xmax = int(lam + 10 * math.sqrt(lam) + 20)
    while True:
        p = poisson_pmf(lam, xmax)
        if 1.0 - p.sum() < tail and p[-1] < tail:
            break
        xmax *= 2
    x = np.arange(xmax + 1, dtype=float)
    return float(p @ x ** beta)


def expected_bpr_time(T, load, C, delta: float = 0.15, beta: float = 3.0) -> np.ndarray:
    """E[T'] per road when the number of vehicles is Poisson(load)."""
    T, load, C = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (T, load, C))
    if (load < 0).any():
        raise ValueError("loads must be nonnegative")
    mom = np.array([poisson_raw_moment(lam, beta) for lam in load])
    return T * (1.0 + delta * mom / C ** beta)


def expected_bpr_deviation(network: AmodNetwork, flows: np.ndarray, delta: float = 0.15,
                           beta: float = 3.0) -> dict[int, float]:
    """Relative increase of the expected trip time per class under BPR delays.

    ``flows[i, k]`` are asymptotic class throughputs (rates) on every queue.
    Road loads are ``T_i * sum_k flows[i, k]``; each class's expected route
    time weights roads by ``flows[i, k] / rate_k``.
    """
    roads = network.road_indices
    T = network.travel_times[roads]
    C = network.capacities[roads]
    f = flows[roads]
    load = T * f.sum(axis=1)
    Tp = expected_bpr_time(T, load, C, delta, beta)
    out = {}
    for k in range(network.n_classes):
        lam = flows[network.class_origin[k], k]
        if not lam > 0:
            continue
        visits = f[:, k] / lam
        base = visits @ T
        out[k] = float((visits @ Tp - base) / base)
    return out
