import numpy as np
import pytest

from bcmp_amod.network import DemandSet, RoadGraph, build_network
from bcmp_amod.optimizer import decompose_to_policy, solve_a_oscarr
from bcmp_amod.scenario import BUNDLED, load_scenario


def two_station(rate_ab=1.0, rate_ba=1.0, T=1.0, C=10.0, pairs=None):
    graph = RoadGraph.from_parts(
        ["1", "2"],
        [("r12", "1", "2", T, C), ("r21", "2", "1", T, C)],
        [("A", "1"), ("B", "2")],
    )
    return build_network(graph, DemandSet((("A", "B", rate_ab), ("B", "A", rate_ba)), pairs))


def random_strong_network(rng, n_vertices=6, n_stations=4, extra_edges=6):
    """Ring plus random chords so every vertex reaches every other one."""
    verts = [f"v{i}" for i in range(n_vertices)]
    edges = {(i, (i + 1) % n_vertices) for i in range(n_vertices)}
    while len(edges) < n_vertices + extra_edges:
        a, b = rng.choice(n_vertices, 2, replace=False)
        edges.add((int(a), int(b)))
    roads = [(f"e{a}_{b}", verts[a], verts[b], float(rng.uniform(0.5, 3.0)), float(rng.uniform(5, 50)))
             for a, b in sorted(edges)]
    st_v = rng.choice(n_vertices, n_stations, replace=False)
    stations = [(f"S{i}", verts[int(v)]) for i, v in enumerate(st_v)]
    demands = []
    for i in range(n_stations):
        for j in range(n_stations):
            if i != j and (j == (i + 1) % n_stations or rng.random() < 0.6):
                demands.append((f"S{i}", f"S{j}", float(rng.uniform(0.1, 2.0))))
    return build_network(RoadGraph.from_parts(verts, roads, stations), DemandSet(tuple(demands)))


@pytest.fixture(scope="session")
def bundled():
    return {name: load_scenario(name) for name in BUNDLED}


@pytest.fixture(scope="session")
def grid(bundled):
    return bundled["grid5x5"]


@pytest.fixture(scope="session")
def optimized(bundled):
    """(FlowSolution, RoutingPolicy) per bundled scenario and mode."""
    out = {}
    for name, doc in bundled.items():
        for mode in ("baseline", "conservative"):
            sol = solve_a_oscarr(doc.network, mode, doc.epsilon)
            out[name, mode] = (sol, decompose_to_policy(sol))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
