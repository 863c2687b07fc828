import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcmp_amod.analysis import mva_sweep, brute_force_stationary, ProductFormModel
from bcmp_amod.network import DemandSet, RoadGraph, RoutingPolicy, build_network, shortest_path_policy
from bcmp_amod.optimizer import (
    InfeasibleLPError,
    adjust_capacity,
    analyze_policy,
    build_lp,
    capacity_bounds,
    decompose_to_policy,
    finite_m_gap,
    poisson_cdf,
    solve_a_oscarr,
    strip_cycles,
    verify_balance,
)
from bcmp_amod.traffic import fold_check

from _oracles import path_lp_objective, poisson_cdf_sum
from conftest import random_strong_network, two_station


def oracle_objective(net, mode, epsilon):
    roads = net.road_indices
    edges = [(net.queues[j].parent, net.queues[j].child, net.queues[j].T) for j in roads]
    stations = {net.queues[i].id: net.queues[i].parent for i in range(net.n_stations)}
    cust = [(c.origin, c.destination, c.rate) for c in net.classes if not c.rebalancing]
    reb = [c.pair for c in net.classes if c.rebalancing]
    return path_lp_objective(edges, stations, cust, reb, capacity_bounds(net, mode, epsilon))


# capacity quantile -------------------------------------------------------------

def test_cdf_identity_matches_summation():
    for C, lam in [(0, 0.3), (3.7, 2.5), (10, 10.0), (40, 33.3)]:
        assert poisson_cdf(C, lam) == pytest.approx(poisson_cdf_sum(C, lam), abs=1e-14)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.0, 500.0), st.floats(1e-4, 0.9999))
def test_adjust_capacity_solves_identity(C, eps):
    c_hat = adjust_capacity(C, eps)
    assert abs(poisson_cdf_sum(C, c_hat) - (1 - eps)) <= 1e-10


def test_adjust_capacity_median_case():
    c_hat = adjust_capacity(10, 0.5)
    assert 9.5 < c_hat < 10.8


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 300.0), st.floats(1e-3, 0.25), st.floats(1e-3, 0.25))
def test_adjust_capacity_monotone(C, e1, e2):
    lo, hi = sorted((e1, e2))
    if hi - lo < 1e-6:
        return
    assert adjust_capacity(C, lo) < adjust_capacity(C, hi)
    assert adjust_capacity(C, lo) <= adjust_capacity(C + 1, lo)
    # for these tolerances the adjusted bound never exceeds the nominal one
    assert adjust_capacity(C, hi) <= C + 1e-12 or math.floor(C) != math.floor(C + 1e-9)


def test_adjust_capacity_errors():
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            adjust_capacity(10, eps)


def test_conservative_bounds_strictly_tighter(grid):
    base = capacity_bounds(grid.network, "baseline")
    cons = capacity_bounds(grid.network, "conservative", 0.1)
    assert np.all(cons < base)


# LP structure and solutions ------------------------------------------------------

def test_two_station_lp_shape():
    inst = build_lp(two_station(), "baseline")
    assert inst.n_vars == 8
    assert sum(1 for lab in inst.ub_labels if lab[0] == "capacity") == 2


def test_symmetric_without_rebalancing_is_feasible():
    net = two_station(pairs=())
    sol = solve_a_oscarr(net)
    assert sol.objective == pytest.approx(2.0)


@pytest.mark.parametrize("backend", ["highs", "simplex"])
def test_asymmetric_two_station(backend):
    sol = solve_a_oscarr(two_station(2.0, 1.0), backend=backend)
    assert sol.rebalancing_rates[("B", "A")] == pytest.approx(1.0, abs=1e-9)
    assert sol.rebalancing_rates[("A", "B")] == pytest.approx(0.0, abs=1e-9)
    assert sol.objective == pytest.approx(4.0, abs=1e-9)
    assert verify_balance(sol).max_residual == 0.0


def test_symmetric_has_no_rebalancing(bundled):
    sol = solve_a_oscarr(bundled["two_station_symmetric"].network)
    assert all(r == 0 for r in sol.rebalancing_rates.values())
    assert sol.objective == pytest.approx(2.0)


@pytest.mark.parametrize("mode", ["baseline", "conservative"])
def test_grid_matches_path_oracle(grid, optimized, mode):
    sol, _ = optimized["grid5x5", mode]
    obj, overflow = oracle_objective(grid.network, mode, 0.1)
    assert overflow == 0.0
    assert sol.objective == pytest.approx(obj, rel=1e-6)
    assert np.all(sol.loads <= sol.capacity_bounds * (1 + 1e-9))
    assert verify_balance(sol).max_residual <= 1e-9


@pytest.mark.parametrize("seed", range(8))
def test_random_networks_match_path_oracle_and_simplex(seed):
    net = random_strong_network(np.random.default_rng(seed), n_vertices=6, n_stations=3, extra_edges=4)
    for mode in ("baseline", "conservative"):
        obj, overflow = oracle_objective(net, mode, 0.1)
        if overflow > 1e-9:
            # both formulations must agree that the demand does not fit
            for backend in ("highs", "simplex"):
                with pytest.raises(InfeasibleLPError):
                    solve_a_oscarr(net, mode, 0.1, backend=backend)
            continue
        sol = solve_a_oscarr(net, mode, 0.1)
        assert sol.objective == pytest.approx(obj, rel=1e-6)
        alt = solve_a_oscarr(net, mode, 0.1, backend="simplex")
        assert alt.objective == pytest.approx(obj, rel=1e-6)


def test_infeasible_names_roads():
    net = two_station(5.0, 5.0, T=1.0, C=1.0)
    with pytest.raises(InfeasibleLPError) as info:
        solve_a_oscarr(net)
    assert {road for road, _ in info.value.violated_rows} == {"r12", "r21"}


def test_corrupted_rates_flagged(optimized):
    sol, _ = optimized["two_station_asymmetric", "baseline"]
    bad = dataclasses.replace(sol, rebalancing_rates={**sol.rebalancing_rates, ("B", "A"): 1.25})
    assert verify_balance(bad, sol.network).max_residual == pytest.approx(0.25)


# decomposition ------------------------------------------------------------------

def test_single_path_policy_is_deterministic(optimized):
    sol, pol = optimized["two_station_asymmetric", "baseline"]
    assert all(list(d.values()) == [1.0] for d in pol.alpha.values())


def test_three_to_one_split():
    graph = RoadGraph.from_parts(
        ["1", "2"], [("a", "1", "2", 1.0, 3.0), ("b", "1", "2", 1.0, 1.0), ("back", "2", "1", 1.0, 10.0)],
        [("A", "1"), ("B", "2")])
    net = build_network(graph, DemandSet((("A", "B", 4.0), ("B", "A", 4.0)), ()))
    sol = solve_a_oscarr(net)
    pol = decompose_to_policy(sol)
    k = net.class_index[("A", "B", False)]
    dist = pol.get(net.queue_index["A"], k)
    assert dist == {net.queue_index["a"]: 0.75, net.queue_index["b"]: 0.25}


def test_strip_cycles_removes_circulation():
    graph = RoadGraph.from_parts(
        ["1", "2", "3"],
        [("r12", "1", "2", 1, 9), ("r21", "2", "1", 1, 9), ("r23", "2", "3", 1, 9), ("r32", "3", "2", 1, 9)],
        [("A", "1"), ("B", "3")])
    net = build_network(graph, DemandSet((("A", "B", 1.0), ("B", "A", 1.0))))
    pos = {net.queues[j].id: r for r, j in enumerate(net.road_indices)}
    f = np.zeros(4)
    f[pos["r12"]] = 1.5
    f[pos["r21"]] = 0.5
    f[pos["r23"]] = 1.0
    g = strip_cycles(net, f)
    assert g[pos["r12"]] == 1.0 and g[pos["r21"]] == 0.0 and g[pos["r23"]] == 1.0


def _roundtrip_error(sol, pol):
    ts = analyze_policy(sol.network, pol)
    return np.abs(ts.pi - sol.flows).max() / max(1.0, np.abs(sol.flows).max()), ts


@pytest.mark.parametrize("name", ["two_station_symmetric", "two_station_asymmetric", "grid5x5"])
@pytest.mark.parametrize("mode", ["baseline", "conservative"])
def test_policy_round_trip(optimized, name, mode):
    sol, pol = optimized[name, mode]
    err, ts = _roundtrip_error(sol, pol)
    assert err <= 1e-7
    g = ts.gamma[ts.is_station]
    assert np.ptp(g) <= 1e-9
    assert fold_check(ts, sol.network).max_rel <= 1e-9


def test_balanced_rates_give_equal_station_gamma(grid):
    """Any routing with rebalancing rates that satisfy station balance
    equalizes station utilizations."""
    sol = solve_a_oscarr(grid.network)
    net = sol.network
    ts = analyze_policy(net, shortest_path_policy(net))
    np.testing.assert_allclose(ts.gamma[ts.is_station], 1.0, atol=1e-9)


# finite-fleet gap -------------------------------------------------------------------

def test_gap_m1_and_symmetric_oracle(optimized):
    sol, pol = optimized["two_station_symmetric", "baseline"]
    ts = analyze_policy(sol.network, pol)
    curve = finite_m_gap(sol.network, pol, range(1, 9))
    assert curve.g_ratio[0] == pytest.approx(1.0 / ts.gamma.sum(), rel=1e-14)
    mdl = ProductFormModel.from_solution(ts)
    for m, r in zip(curve.m, curve.g_ratio):
        assert r == pytest.approx(brute_force_stationary(mdl, int(m)).g_ratio, abs=1e-9)


def test_gap_curve_grid(optimized):
    sol, pol = optimized["grid5x5", "baseline"]
    curve = finite_m_gap(sol.network, pol, list(range(10, 201, 10)) + [1000])
    assert np.all(np.diff(curve.g_ratio) >= 0)
    assert curve.objective == pytest.approx(sol.objective, rel=1e-9)
    assert curve.g_ratio[-1] >= 0.99
    assert curve.g_ratio[curve.m.tolist().index(200)] >= 0.95
