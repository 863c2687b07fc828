"""Discrete-event simulation of the fleet under a routing policy.

Customers (and virtual rebalancing customers) arrive at each station as a
Poisson stream and take the head-of-line vehicle; if the station is empty the
request is lost.  Vehicles follow the policy road by road and join the
destination station's queue on arrival.  Travel times on a road are drawn
from a configurable family with the road's mean, which lets the product-form
insensitivity be checked empirically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._accel import USE_NUMBA, njit
from .network import AmodNetwork, NetworkValidationError, RoutingPolicy

FAMILIES = {"exponential": 0, "deterministic": 1, "lognormal": 2}


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    fleet_size: int
    horizon: float = 1e5
    warmup: float | None = None  # default: 10% of the horizon
    seed: int = 0
    family: str = "exponential"
    sigma: float = 0.5  # lognormal shape
    sampling_interval: float | None = None  # default: 5000 samples after warmup
    n_batches: int = 20

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = 0.1 * self.horizon
        if self.sampling_interval is None:
            self.sampling_interval = (self.horizon - self.warmup) / 5000.0
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0")
        if self.fleet_size < 1:
            raise ValueError("fleet size must be at least 1")
        if self.family not in FAMILIES:
            raise ValueError(f"travel-time family must be one of {sorted(FAMILIES)}")
        if self.family == "lognormal" and not self.sigma > 0:
            raise ValueError("lognormal sigma must be positive")
        if self.n_batches < 2:
            raise ValueError("need at least two batches")
        if not self.sampling_interval > 0:
            raise ValueError("sampling interval must be positive")


def _simulate_kernel(m, horizon, warmup, n_batches, sample_interval, n_samples, seed,
                     n_stations, child_vertex, station_at_vertex, class_dest, class_rebal,
                     station_rate, sw_ptr, sw_cls, sw_cum, pol_ptr, pol_next, pol_cum,
                     T, family, sigma):
    np.random.seed(seed)
    n_q = T.shape[0]
    K = class_dest.shape[0]
    n_tracks = n_q + 3  # queues, vehicles on roads, rebalancing vehicles on roads, spare
    ROAD_ALL = n_q
    ROAD_REB = n_q + 1
    blen = (horizon - warmup) / n_batches

    occ = np.zeros(n_tracks, np.int64)
    last = np.zeros(n_tracks)
    acc = np.zeros((n_batches, n_tracks))
    acc2 = np.zeros((n_batches, n_tracks))
    nonempty = np.zeros((n_batches, n_stations))

    arrivals = np.zeros((n_batches, n_stations), np.int64)
    found = np.zeros((n_batches, n_stations), np.int64)
    cust_arr = np.zeros((n_batches, n_stations), np.int64)
    cust_served = np.zeros((n_batches, n_stations), np.int64)
    trips = np.zeros(n_batches, np.int64)
    reb_trips = np.zeros(n_batches, np.int64)
    trace = np.zeros((n_samples, n_q), np.int32)

    # station FIFO ring buffers
    sq = np.zeros((n_stations, m), np.int64)
    head = np.zeros(n_stations, np.int64)
    cnt = np.zeros(n_stations, np.int64)
    veh_q = np.zeros(m, np.int64)
    veh_k = np.full(m, -1, np.int64)

    # event heap keyed by (time, seq)
    cap = m + n_stations + 1
    ht = np.zeros(cap)
    hs = np.zeros(cap, np.int64)
    hk = np.zeros(cap, np.int64)
    hd = np.zeros(cap, np.int64)
    hn = 0
    seq = 0

    for v in range(m):
        s = v % n_stations
        sq[s, (head[s] + cnt[s]) % m] = v
        cnt[s] += 1
        veh_q[v] = s
        occ[s] += 1

    for s in range(n_stations):
        if station_rate[s] > 0:
            te = -math.log(1.0 - np.random.random()) / station_rate[s]
            # push
            pos = hn
            hn += 1
            while pos > 0:
                par = (pos - 1) // 2
                if ht[par] < te or (ht[par] == te and hs[par] < seq):
                    break
                ht[pos] = ht[par]
                hs[pos] = hs[par]
                hk[pos] = hk[par]
                hd[pos] = hd[par]
                pos = par
            ht[pos] = te
            hs[pos] = seq
            hk[pos] = 0
            hd[pos] = s
            seq += 1

    batch = -1
    next_boundary = warmup
    next_sample = warmup
    si = 0
    err_q = -1
    err_k = -1

    while True:
        if hn == 0:
            te = horizon
        else:
            te = ht[0]
        if te > horizon:
            te = horizon
        # batch boundaries up to te
        while batch < n_batches and next_boundary <= te:
            for q in range(n_tracks):
                if batch >= 0:
                    dt = next_boundary - last[q]
                    acc[batch, q] += occ[q] * dt
                    acc2[batch, q] += occ[q] * occ[q] * dt
                    if q < n_stations and occ[q] > 0:
                        nonempty[batch, q] += dt
                last[q] = next_boundary
            batch += 1
            next_boundary = warmup + (batch + 1) * blen
        while si < n_samples and next_sample <= te:
            for q in range(n_q):
                trace[si, q] = occ[q]
            si += 1
            next_sample = warmup + si * sample_interval
        if batch >= n_batches or hn == 0:
            break

        # pop
        t = ht[0]
        kind = hk[0]
        data = hd[0]
        hn -= 1
        if hn > 0:
            lt = ht[hn]
            ls = hs[hn]
            lk = hk[hn]
            ld = hd[hn]
            pos = 0
            while True:
                c = 2 * pos + 1
                if c >= hn:
                    break
                if c + 1 < hn and (ht[c + 1] < ht[c] or (ht[c + 1] == ht[c] and hs[c + 1] < hs[c])):
                    c += 1
                if lt < ht[c] or (lt == ht[c] and ls < hs[c]):
                    break
                ht[pos] = ht[c]
                hs[pos] = hs[c]
                hk[pos] = hk[c]
                hd[pos] = hd[c]
                pos = c
            ht[pos] = lt
            hs[pos] = ls
            hk[pos] = lk
            hd[pos] = ld

        v = -1
        from_q = -1
        k = -1
        if kind == 0:
            s = data
            te = t - math.log(1.0 - np.random.random()) / station_rate[s]
            pos = hn
            hn += 1
            while pos > 0:
                par = (pos - 1) // 2
                if ht[par] < te or (ht[par] == te and hs[par] < seq):
                    break
                ht[pos] = ht[par]
                hs[pos] = hs[par]
                hk[pos] = hk[par]
                hd[pos] = hd[par]
                pos = par
            ht[pos] = te
            hs[pos] = seq
            hk[pos] = 0
            hd[pos] = s
            seq += 1

            u = np.random.random()
            k = sw_cls[sw_ptr[s + 1] - 1]
            for p in range(sw_ptr[s], sw_ptr[s + 1]):
                if u < sw_cum[p]:
                    k = sw_cls[p]
                    break
            real = not class_rebal[k]
            if batch >= 0:
                arrivals[batch, s] += 1
                if real:
                    cust_arr[batch, s] += 1
            if cnt[s] > 0:
                v = sq[s, head[s]]
                head[s] = (head[s] + 1) % m
                cnt[s] -= 1
                if batch >= 0:
                    dt = t - last[s]
                    acc[batch, s] += occ[s] * dt
                    acc2[batch, s] += occ[s] * occ[s] * dt
                    if occ[s] > 0:
                        nonempty[batch, s] += dt
                    found[batch, s] += 1
                    trips[batch] += 1
                    if real:
                        cust_served[batch, s] += 1
                    else:
                        reb_trips[batch] += 1
                last[s] = t
                occ[s] -= 1
                veh_k[v] = k
                from_q = s
        else:
            v = data
            j = veh_q[v]
            k = veh_k[v]
            for q in (j, ROAD_ALL, ROAD_REB):
                if q == ROAD_REB and not class_rebal[k]:
                    continue
                if batch >= 0:
                    dt = t - last[q]
                    acc[batch, q] += occ[q] * dt
                    acc2[batch, q] += occ[q] * occ[q] * dt
                last[q] = t
                occ[q] -= 1
            w = child_vertex[j]
            st = station_at_vertex[w]
            if st >= 0 and st == class_dest[k]:
                sq[st, (head[st] + cnt[st]) % m] = v
                cnt[st] += 1
                if batch >= 0:
                    dt = t - last[st]
                    acc[batch, st] += occ[st] * dt
                    acc2[batch, st] += occ[st] * occ[st] * dt
                    if occ[st] > 0:
                        nonempty[batch, st] += dt
                last[st] = t
                occ[st] += 1
                veh_q[v] = st
            else:
                from_q = j

        if from_q >= 0:
            state = from_q * K + k
            a = pol_ptr[state]
            b = pol_ptr[state + 1]
            if a == b:
                err_q = from_q
                err_k = k
                break
            u = np.random.random()
            nxt = pol_next[b - 1]
            for p in range(a, b):
                if u < pol_cum[p]:
                    nxt = pol_next[p]
                    break
            if family == 0:
                dur = -T[nxt] * math.log(1.0 - np.random.random())
            elif family == 1:
                dur = T[nxt]
            else:
                u1 = np.random.random()
                u2 = np.random.random()
                z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
                dur = math.exp(math.log(T[nxt]) - 0.5 * sigma * sigma + sigma * z)
            for q in (nxt, ROAD_ALL, ROAD_REB):
                if q == ROAD_REB and not class_rebal[k]:
                    continue
                if batch >= 0:
                    dt = t - last[q]
                    acc[batch, q] += occ[q] * dt
                    acc2[batch, q] += occ[q] * occ[q] * dt
                last[q] = t
                occ[q] += 1
            veh_q[v] = nxt
            te = t + dur
            pos = hn
            hn += 1
            while pos > 0:
                par = (pos - 1) // 2
                if ht[par] < te or (ht[par] == te and hs[par] < seq):
                    break
                ht[pos] = ht[par]
                hs[pos] = hs[par]
                hk[pos] = hk[par]
                hd[pos] = hd[par]
                pos = par
            ht[pos] = te
            hs[pos] = seq
            hk[pos] = 1
            hd[pos] = v
            seq += 1

    final_occ = occ[:n_q].copy()
    return (acc, acc2, nonempty, arrivals, found, cust_arr, cust_served, trips, reb_trips,
            trace[:si], final_occ, err_q, err_k)


_simulate_kernel_nb = njit(_simulate_kernel)


@dataclass
class SimReport:
    config: SimConfig
    queue_ids: list
    is_station: np.ndarray
    availability: np.ndarray  # per station
    availability_hw: np.ndarray
    availability_batches: np.ndarray  # (n_batches, n_stations)
    service_rate: np.ndarray
    arrivals: np.ndarray
    served: np.ndarray
    lost: np.ndarray
    occupancy_mean: np.ndarray  # per queue
    occupancy_var: np.ndarray
    occupancy_hw: np.ndarray
    occupancy_batches: np.ndarray  # (n_batches, n_queues)
    road_vehicles_batches: np.ndarray  # (n_batches,) mean vehicles on roads
    rebalancing_trip_share: float
    rebalancing_vehicle_share: float
    trace_times: np.ndarray
    trace: np.ndarray
    final_occupancy: np.ndarray = field(repr=False, default=None)

    def standard_error(self, batches: np.ndarray) -> np.ndarray:
        return batches.std(axis=0, ddof=1) / math.sqrt(batches.shape[0])

    @property
    def trips(self) -> int:
        return int(self.served.sum())


def _compile_tables(network: AmodNetwork, policy: RoutingPolicy):
    policy.validate(network)
    S = network.n_stations
    K = network.n_classes
    vidx = {v: i for i, v in enumerate(network.vertices)}
    child_vertex = np.array([vidx[q.child] for q in network.queues], dtype=np.int64)
    station_at_vertex = np.full(len(network.vertices), -1, dtype=np.int64)
    for v, s in network.station_at.items():
        station_at_vertex[vidx[v]] = s
    rates = network.class_rates
    sw_ptr, sw_cls, sw_cum = [0], [], []
    station_rate = np.zeros(S)
    for s in range(S):
        ks = [k for k in network.origin_classes(s) if rates[k] > 0]
        tot = rates[ks].sum() if ks else 0.0
        station_rate[s] = tot
        if ks:
            cum = np.cumsum(rates[ks]) / tot
            cum[-1] = 1.0
            sw_cls += ks
            sw_cum += cum.tolist()
        else:
            sw_cls.append(0)
            sw_cum.append(1.0)
        sw_ptr.append(len(sw_cls))
    pol_ptr = np.zeros(network.n_queues * K + 1, dtype=np.int64)
    pol_next, pol_cum = [], []
    for state in range(network.n_queues * K):
        i, k = divmod(state, K)
        dist = policy.get(i, k)
        if dist:
            items = sorted((j, p) for j, p in dist.items() if p > 0)
            cum = np.cumsum([p for _, p in items])
            cum /= cum[-1]
            pol_next += [j for j, _ in items]
            pol_cum += cum.tolist()
        pol_ptr[state + 1] = len(pol_next)
    return dict(
        n_stations=S, child_vertex=child_vertex, station_at_vertex=station_at_vertex,
        class_dest=network.class_destination, class_rebal=network.is_rebalancing,
        station_rate=station_rate,
        sw_ptr=np.array(sw_ptr, dtype=np.int64), sw_cls=np.array(sw_cls, dtype=np.int64),
        sw_cum=np.array(sw_cum, dtype=float),
        pol_ptr=pol_ptr, pol_next=np.array(pol_next, dtype=np.int64), pol_cum=np.array(pol_cum, dtype=float),
        T=np.nan_to_num(network.travel_times, nan=0.0),
    )


def seed32(seed: int) -> int:
    return int(np.random.SeedSequence(int(seed) & (2 ** 64 - 1)).generate_state(1)[0])


def simulate(network: AmodNetwork, policy: RoutingPolicy, config: SimConfig,
             rebalancing_rates=None, use_numba: bool | None = None) -> SimReport:
    """Run one replication; identical inputs give identical reports."""
    if rebalancing_rates is not None:
        network = network.with_rebalancing_rates(rebalancing_rates)
    tab = _compile_tables(network, policy)
    cfg = config
    n_samples = int(math.floor((cfg.horizon - cfg.warmup) / cfg.sampling_interval))
    args = (int(cfg.fleet_size), float(cfg.horizon), float(cfg.warmup), int(cfg.n_batches),
            float(cfg.sampling_interval), n_samples, seed32(cfg.seed),
            tab["n_stations"], tab["child_vertex"], tab["station_at_vertex"], tab["class_dest"],
            tab["class_rebal"], tab["station_rate"], tab["sw_ptr"], tab["sw_cls"], tab["sw_cum"],
            tab["pol_ptr"], tab["pol_next"], tab["pol_cum"], tab["T"], FAMILIES[cfg.family], float(cfg.sigma))
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        out = _simulate_kernel_nb(*args)
    else:
        state = np.random.get_state()
        try:
            out = _simulate_kernel(*args)
        finally:
            np.random.set_state(state)
    (acc, acc2, nonempty, arrivals, found, cust_arr, cust_served, trips, reb_trips,
     trace, final_occ, err_q, err_k) = out
    if err_q >= 0:
        v = network.queues[err_q].child
        raise NetworkValidationError(
            f"policy has no entry at vertex {v} for class {network.classes[err_k].pair} "
            f"(arriving via {network.queues[err_q].id})")
    if int(final_occ.sum()) != cfg.fleet_size:
        raise SimulationError("vehicle conservation violated")

    S = tab["n_stations"]
    n_q = network.n_queues
    B = cfg.n_batches
    blen = (cfg.horizon - cfg.warmup) / B
    tq = stats.t.ppf(0.975, B - 1)

    occ_b = acc[:, :n_q] / blen
    occ_mean = occ_b.mean(axis=0)
    occ_var = (acc2[:, :n_q].sum(axis=0) / (B * blen)) - occ_mean ** 2
    occ_hw = tq * occ_b.std(axis=0, ddof=1) / math.sqrt(B)

    arr_tot = arrivals.sum(axis=0)
    found_tot = found.sum(axis=0)
    time_frac = nonempty.sum(axis=0) / (B * blen)
    with np.errstate(invalid="ignore", divide="ignore"):
        av_b = np.where(arrivals > 0, found / np.maximum(arrivals, 1), nonempty / blen)
        avail = np.where(arr_tot > 0, found_tot / np.maximum(arr_tot, 1), time_frac)
        cust_tot = cust_arr.sum(axis=0)
        service = np.where(cust_tot > 0, cust_served.sum(axis=0) / np.maximum(cust_tot, 1), 1.0)
    av_hw = tq * av_b.std(axis=0, ddof=1) / math.sqrt(B)

    trips_tot = trips.sum()
    road_all = acc[:, n_q].sum()
    road_reb = acc[:, n_q + 1].sum()
    return SimReport(
        config=cfg,
        queue_ids=[q.id for q in network.queues],
        is_station=network.is_station,
        availability=avail, availability_hw=av_hw, availability_batches=av_b,
        service_rate=service,
        arrivals=arr_tot, served=found_tot, lost=arr_tot - found_tot,
        occupancy_mean=occ_mean, occupancy_var=np.maximum(occ_var, 0.0), occupancy_hw=occ_hw,
        occupancy_batches=occ_b, road_vehicles_batches=acc[:, n_q] / blen,
        rebalancing_trip_share=float(reb_trips.sum() / trips_tot) if trips_tot else 0.0,
        rebalancing_vehicle_share=float(road_reb / road_all) if road_all > 0 else 0.0,
        trace_times=cfg.warmup + np.arange(trace.shape[0]) * cfg.sampling_interval,
        trace=trace,
        final_occupancy=final_occ,
    )


def occupancy_histogram(report: SimReport, queue: int) -> np.ndarray:
    """Empirical distribution of sampled occupancy of one queue."""
    if report.trace.shape[0] == 0:
        raise ValueError("no occupancy samples were recorded")
    if not 0 <= queue < report.trace.shape[1]:
        raise ValueError(f"queue {queue} was not traced")
    x = report.trace[:, queue]
    h = np.bincount(x).astype(float)
    return h / h.sum()


def write_trace_csv(report: SimReport, path, queues=None) -> None:
    """CSV with columns time, queueId, occupancy."""
    queues = range(len(report.queue_ids)) if queues is None else queues
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "queueId", "occupancy"])
        for s, t in enumerate(report.trace_times):
            for q in queues:
                w.writerow([repr(float(t)), report.queue_ids[q], int(report.trace[s, q])])
