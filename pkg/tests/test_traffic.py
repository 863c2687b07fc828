import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcmp_amod.network import RoutingPolicy, assemble_routing_matrix, shortest_path_policy
from bcmp_amod.optimizer import analyze_policy
from bcmp_amod.traffic import (
    ReducibleChainError,
    class_conservation_residual,
    fixed_point_residual,
    fold_check,
    solve_traffic_equations,
    utilization_profile,
)
from bcmp_amod.network import DemandSet, RoadGraph, build_network

from _oracles import left_eigenvector
from conftest import random_strong_network, two_station


def random_policy(net, rng):
    rules = {}
    for k, c in enumerate(net.classes):
        if not c.rate > 0:
            continue
        t = net.vertex_of_station(net.queue_index[c.destination])
        for v in net.vertices:
            if v == t or not net.out_roads[v]:
                continue
            outs = net.out_roads[v]
            p = rng.dirichlet(np.ones(len(outs)))
            rules[(v, k)] = dict(zip(outs, p))
    return RoutingPolicy.from_vertex_rules(net, rules)


def test_symmetric_two_station():
    net = two_station()
    sol = analyze_policy(net, shortest_path_policy(net))
    np.testing.assert_allclose(sol.total, [1, 1, 1, 1], atol=1e-12)
    np.testing.assert_allclose(sol.gamma, [1, 1, 1, 1], atol=1e-12)


def test_asymmetric_with_rebalancing_is_balanced():
    net = two_station(2.0, 1.0).with_rebalancing_rates({("B", "A"): 1.0})
    sol = analyze_policy(net, shortest_path_policy(net))
    np.testing.assert_allclose(sol.gamma[:2], [1.0, 1.0], atol=1e-12)
    assert fold_check(sol, net).max_abs <= 1e-12


@pytest.mark.parametrize("seed", range(15))
def test_random_policy_matches_eigenvector_oracle(seed):
    rng = np.random.default_rng(seed)
    net = random_strong_network(rng, n_vertices=6, n_stations=4)
    M = assemble_routing_matrix(net, random_policy(net, rng))
    sol = solve_traffic_equations(M, net)
    x = left_eigenvector(M.P)
    ref = x * (net.station_rates[0] / x[M.states[:, 0] == 0].sum())
    got = sol.pi[M.states[:, 0], M.states[:, 1]]
    np.testing.assert_allclose(got, ref, atol=1e-9 * ref.max())
    assert sol.residual <= 1e-9
    assert fixed_point_residual(M.P, got) <= 1e-9
    assert fold_check(sol, net).max_rel <= 1e-9
    assert class_conservation_residual(sol, net, M) <= 1e-9


def test_corrupted_solution_is_flagged():
    net = two_station(2.0, 1.0).with_rebalancing_rates({("B", "A"): 1.0})
    sol = analyze_policy(net, shortest_path_policy(net))
    sol.pi[0] *= 1.1
    assert fold_check(sol, net).max_abs > 1e-3


def test_reducible_chain_detected():
    graph = RoadGraph.from_parts(
        ["1", "2", "3"],
        [("r12", "1", "2", 1, 10), ("r21", "2", "1", 1, 10), ("r23", "2", "3", 1, 10), ("r32", "3", "2", 1, 10)],
        [("A", "1"), ("B", "2"), ("C", "3")])
    # A and B trade vehicles; C only sends to B, so C empties forever
    net = build_network(graph, DemandSet((("A", "B", 1.0), ("B", "A", 1.0), ("C", "B", 1.0)), ()))
    with pytest.raises(ReducibleChainError):
        solve_traffic_equations(assemble_routing_matrix(net, shortest_path_policy(net)), net)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scale_covariance(seed, c):
    rng = np.random.default_rng(seed)
    net = random_strong_network(rng, n_vertices=5, n_stations=3)
    sol = analyze_policy(net, random_policy(net, rng))
    a = utilization_profile(sol, net)
    b = utilization_profile(sol.scaled(c), net)
    np.testing.assert_allclose(sol.scaled(c).pi, c * sol.pi)
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-12)
    assert a.bottlenecks.tolist() == b.bottlenecks.tolist()


def test_balanced_grid_all_stations_bottleneck(optimized, grid):
    sol, pol = optimized["grid5x5", "baseline"]
    prof = utilization_profile(analyze_policy(sol.network, pol), sol.network)
    assert len(prof.bottlenecks) == 4


def test_unbalanced_policy_fewer_bottlenecks(grid):
    net = grid.network
    prof = utilization_profile(analyze_policy(net, shortest_path_policy(net)), net)
    assert 0 < len(prof.bottlenecks) < net.n_stations


def test_single_station_is_its_own_bottleneck():
    graph = RoadGraph.from_parts(["1", "2"], [("a", "1", "2", 1, 5), ("b", "2", "1", 1, 5)], [("A", "1")])
    net = build_network(graph, DemandSet((), ()))
    from bcmp_amod.traffic import NetworkSolution
    sol = NetworkSolution(np.array([[1.0], [1.0], [1.0]])[:, :0].sum(axis=1, keepdims=True) + 1.0,
                          np.array([1.0, 1.0, 1.0]), net.is_station)
    assert utilization_profile(sol, net).bottlenecks.tolist() == [0]
