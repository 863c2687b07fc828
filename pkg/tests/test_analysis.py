import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcmp_amod.analysis import (
    MAX_STATES,
    ProductFormModel,
    asymptotic_metrics,
    brute_force_stationary,
    bpr_time,
    convolution_G,
    distribution_moments,
    expected_bpr_deviation,
    expected_bpr_time,
    marginal_distribution,
    marginal_table,
    mva,
    mva_sweep,
    poisson_pmf,
    poisson_raw_moment,
)
from bcmp_amod.network import shortest_path_policy
from bcmp_amod.optimizer import analyze_policy
from bcmp_amod.traffic import utilization_profile

from _oracles import ctmc_stationary, left_eigenvector, mva_reference, product_form_enumeration
from conftest import two_station

SS_IS = ProductFormModel.from_gamma([1.0, 1.0], [True, False])


def random_model(rng, n=None):
    n = n or int(rng.integers(1, 7))
    gamma = rng.uniform(0.05, 3.0, n)
    kinds = rng.random(n) < 0.5
    return ProductFormModel.from_gamma(gamma, kinds)


def test_hand_example_constants():
    G = convolution_G(SS_IS.gamma, SS_IS.is_station, 2).values()
    np.testing.assert_allclose(G, [1.0, 2.0, 2.5], rtol=1e-15)
    assert convolution_G([0.7], [True], 0).values().tolist() == [1.0]


def test_hand_example_mva():
    rep = mva(SS_IS, 2)
    assert rep.g_ratio == pytest.approx(0.8, abs=1e-15)
    np.testing.assert_allclose(rep.queue_length, [1.2, 0.8], atol=1e-15)
    assert rep.availability[0] == pytest.approx(0.8, abs=1e-15)
    assert np.isnan(rep.availability[1])


def test_hand_example_marginal_and_oracle():
    np.testing.assert_allclose(marginal_distribution(SS_IS, 1, 2), [0.4, 0.4, 0.2], atol=1e-15)
    assert marginal_distribution(SS_IS, 0, 0).tolist() == [1.0]
    orc = brute_force_stationary(SS_IS, 2)
    assert orc.G == pytest.approx(2.5)
    assert orc.mean[0] == pytest.approx(1.2)
    empty = brute_force_stationary(SS_IS, 0)
    assert empty.G == 1.0 and empty.states.shape == (1, 2)


def test_m_zero_and_dimension_errors():
    rep = mva(SS_IS, 0)
    assert rep.queue_length.sum() == 0
    with pytest.raises(ValueError):
        mva(SS_IS, 3, network=two_station())
    with pytest.raises(IndexError):
        marginal_distribution(SS_IS, 5, 2)


def test_single_vehicle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mdl = random_model(rng)
        rep = mva(mdl, 1)
        assert rep.queue_length.sum() == pytest.approx(1.0, abs=1e-14)
        assert rep.g_ratio == pytest.approx(1.0 / mdl.gamma.sum(), rel=1e-14)


@pytest.mark.parametrize("seed", range(40))
def test_random_models_against_enumeration(seed):
    rng = np.random.default_rng(seed)
    mdl = random_model(rng)
    m = int(rng.integers(1, 9))
    sts, p, G = product_form_enumeration(mdl.gamma, mdl.is_station, m)
    got = convolution_G(mdl.gamma, mdl.is_station, m)
    assert math.exp(got.log(m)) == pytest.approx(G, rel=1e-12)
    X, L = mva_reference(mdl.gamma, mdl.is_station, m)
    rep = mva(mdl, m)
    np.testing.assert_allclose(rep.queue_length, L, atol=1e-12)
    np.testing.assert_allclose(rep.queue_length, p @ sts, atol=1e-10)
    for i in range(mdl.n_queues):
        ref = np.bincount(sts[:, i], weights=p, minlength=m + 1)
        np.testing.assert_allclose(marginal_distribution(mdl, i, m), ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(12))
def test_product_form_against_ctmc(seed):
    """MVA on the compressed network equals the stationary law of the
    actual Markov chain built from a routing matrix and service rates."""
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 5))
    R = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    np.fill_diagonal(R, 0.0)
    R[np.arange(n), (np.arange(n) + 1) % n] += 0.2  # keep it irreducible
    R /= R.sum(axis=1, keepdims=True)
    mu = rng.uniform(0.5, 2.0, n)
    kinds = rng.random(n) < 0.5
    pi = left_eigenvector(R)
    mdl = ProductFormModel(pi, mu, kinds)
    m = int(rng.integers(1, 6))
    sts, p = ctmc_stationary(R, mu, kinds, m)
    rep = mva(mdl, m)
    np.testing.assert_allclose(rep.queue_length, p @ sts, atol=1e-9)
    busy = np.array([p[sts[:, i] > 0].sum() for i in range(n)])
    np.testing.assert_allclose(rep.availability[kinds], busy[kinds], atol=1e-9)
    # throughput of a station is mu * P(busy); of a road mu * E[x]
    flow = np.where(kinds, mu * busy, mu * (p @ sts))
    np.testing.assert_allclose(rep.throughput, flow, atol=1e-9)


def test_oracle_guard():
    mdl = ProductFormModel.from_gamma(np.ones(30), np.ones(30, bool))
    with pytest.raises(ValueError, match="guard"):
        brute_force_stationary(mdl, 30)
    assert MAX_STATES == 1_000_000


def test_equal_gamma_marginals_symmetric():
    mdl = ProductFormModel.from_gamma([0.7, 0.7, 0.7, 1.3], [True, True, False, False])
    orc = brute_force_stationary(mdl, 6)
    np.testing.assert_allclose(orc.marginals[0], orc.marginals[1], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60))
def test_mva_invariants(seed, m):
    rng = np.random.default_rng(seed)
    mdl = random_model(rng, n=int(rng.integers(2, 9)))
    sweep = mva_sweep(mdl, m)
    assert np.all(np.diff(sweep.X[1:]) >= -1e-12)
    np.testing.assert_allclose(sweep.L.sum(axis=1), np.arange(m + 1), rtol=1e-9)
    rep = sweep.report(m)
    roads = ~mdl.is_station
    # Little's law on roads in gamma units
    np.testing.assert_allclose(rep.queue_length[roads], rep.throughput[roads] / mdl.base_rate[roads], rtol=1e-9)
    assert np.all((rep.availability[~roads] >= 0) & (rep.availability[~roads] <= 1 + 1e-12))


def test_class_scaling_sums(optimized):
    sol, pol = optimized["grid5x5", "baseline"]
    rep = mva(analyze_policy(sol.network, pol), 30)
    np.testing.assert_allclose(rep.throughput_class.sum(axis=1), rep.throughput, rtol=1e-12)
    np.testing.assert_allclose(rep.queue_length_class.sum(axis=1), rep.queue_length, rtol=1e-12)


def test_grid_small_m_matches_lumped_oracle(optimized):
    """The grid has 84 queues; infinite-server queues superpose into one
    Poisson queue with the summed gamma, which keeps enumeration small."""
    sol, pol = optimized["grid5x5", "baseline"]
    ts = analyze_policy(sol.network, pol)
    gamma = ts.gamma
    st_mask = ts.is_station
    lumped = ProductFormModel.from_gamma(np.r_[gamma[st_mask], gamma[~st_mask].sum()],
                                         np.r_[np.ones(st_mask.sum(), bool), False])
    for m in range(1, 9):
        rep = mva(ts, m)
        orc = brute_force_stationary(lumped, m)
        np.testing.assert_allclose(rep.queue_length[st_mask], orc.mean[:-1], atol=1e-9)
        np.testing.assert_allclose(rep.availability[st_mask], orc.availability[:-1], atol=1e-9)
        assert rep.queue_length[~st_mask].sum() == pytest.approx(orc.mean[-1], abs=1e-9)
        for s in range(st_mask.sum()):
            np.testing.assert_allclose(marginal_distribution(ts, s, m), orc.marginals[s], atol=1e-9)


def test_marginal_table_matches_single_calls():
    rng = np.random.default_rng(5)
    mdl = random_model(rng, n=5)
    tab = marginal_table(mdl, 2, 12)
    for m in (0, 1, 7, 12):
        np.testing.assert_allclose(tab[m], marginal_distribution(mdl, 2, m), atol=1e-15)
        assert tab[m].sum() == pytest.approx(1.0, abs=1e-9)


def test_large_population_rescaling():
    mdl = ProductFormModel.from_gamma([50.0, 40.0, 1e3, 2e3], [True, True, False, False])
    p = marginal_distribution(mdl, 2, 3000)
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0, abs=1e-9)
    G = convolution_G(mdl.gamma, mdl.is_station, 3000)
    with pytest.raises(OverflowError):
        G.values()


def test_asymptotic_laws():
    from bcmp_amod.traffic import NetworkSolution, UtilizationProfile
    sol = NetworkSolution(np.array([[2.0], [1.0], [3.0]]), np.array([2.0, 2.0, 1.0]), np.array([True, True, False]))
    prof = utilization_profile(sol)
    rep = asymptotic_metrics(prof, sol)
    assert rep.availability[0] == 1.0 and rep.availability[1] == pytest.approx(0.5)
    assert rep.limiting_pmf(2, 5)[0] == pytest.approx(math.exp(-3))
    np.testing.assert_allclose(rep.limiting_pmf(1, 4), 0.5 ** (np.arange(5) + 1))
    with pytest.raises(ValueError):
        rep.limiting_pmf(0, 3)


def test_balanced_grid_availability_large_m(optimized):
    sol, pol = optimized["grid5x5", "baseline"]
    sweep = mva_sweep(analyze_policy(sol.network, pol), 1000)
    assert np.all(sweep.availability[200] >= 0.95)
    assert np.all(sweep.availability[1000] >= 0.99)
    a = sweep.availability[5:, 0]
    assert np.all(np.diff(a) >= -1e-12)


def test_bpr_values():
    assert bpr_time(1.0, 10.0, 10.0, 0.15, 3) == 1.15
    assert bpr_time(3.0, 0.0, 10.0) == 3.0
    assert bpr_time(2.0, 20.0, 10.0, 0.15, 3) == pytest.approx(4.4, abs=1e-15)
    with pytest.raises(ValueError):
        bpr_time(1.0, -1.0, 10.0)


def test_poisson_moments():
    assert poisson_raw_moment(10.0, 3) == 1310.0
    # general-beta summation agrees with the closed form
    assert poisson_raw_moment(10.0, 3.0000000001) == pytest.approx(1310.0, rel=1e-8)
    assert poisson_raw_moment(4.0, 2.0) == pytest.approx(4.0 + 16.0, rel=1e-12)
    assert poisson_raw_moment(0.0, 3) == 0.0
    assert expected_bpr_time(1.0, 10.0, 10.0)[0] == pytest.approx(1 + 0.15 * 1.31)
    assert expected_bpr_time(1.0, 0.0, 10.0)[0] == 1.0


def test_bpr_deviation_single_road():
    net = two_station(T=1.0, C=10.0)
    flows = np.zeros((net.n_queues, net.n_classes))
    k = net.class_index[("A", "B", False)]
    flows[net.queue_index["A"], k] = 10.0
    flows[net.queue_index["r12"], k] = 10.0
    dev = expected_bpr_deviation(net, flows)
    assert dev[k] == pytest.approx(0.15 * 1310 / 1000, abs=1e-12)


def test_distribution_moments():
    mean, var = distribution_moments(poisson_pmf(3.0, 80))
    assert mean == pytest.approx(3.0) and var == pytest.approx(3.0)
