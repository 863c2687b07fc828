"""Hot numeric kernels: MVA recursion and normalizing-constant convolution.

Every kernel has a numba version and a pure-numpy version with identical
signatures; the public dispatchers pick one via ``_accel.USE_NUMBA``.
"""

import math

import numpy as np
from scipy.special import gammaln

from ._accel import USE_NUMBA, njit


@njit
def _mva_numba(gamma, is_station, m):
    n_q = gamma.shape[0]
    X = np.zeros(m + 1)
    L = np.zeros((m + 1, n_q))
    for n in range(1, m + 1):
        demand = 0.0
        for i in range(n_q):
            if is_station[i]:
                demand += gamma[i] * (1.0 + L[n - 1, i])
            else:
                demand += gamma[i]
        x = n / demand
        X[n] = x
        for i in range(n_q):
            if is_station[i]:
                L[n, i] = x * gamma[i] * (1.0 + L[n - 1, i])
            else:
                L[n, i] = x * gamma[i]
    return X, L


def _mva_numpy(gamma, is_station, m):
    X = np.zeros(m + 1)
    L = np.zeros((m + 1, gamma.shape[0]))
    resid = np.where(is_station, 1.0, 0.0)
    for n in range(1, m + 1):
        w = gamma * (1.0 + resid * L[n - 1])
        X[n] = n / w.sum()
        L[n] = X[n] * w
    return X, L


def mva_recursion(gamma, is_station, m):
    """Exact single-class MVA for a mix of single-server and infinite-server queues.

    Works in relative-utilization units: ``X[n] = G(n-1)/G(n)`` and
    ``L[n, i]`` is the mean number of vehicles at queue i with n vehicles.
    """
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    is_station = np.ascontiguousarray(is_station, dtype=np.bool_)
    if USE_NUMBA:
        return _mva_numba(gamma, is_station, int(m))
    return _mva_numpy(gamma, is_station, int(m))


@njit
def _convolve_numba(gamma, is_station, m):
    lg = np.full(m + 1, -np.inf)
    lg[0] = 0.0
    # infinite-server queues superpose into one Poisson factor
    c_is = 0.0
    for q in range(gamma.shape[0]):
        if not is_station[q]:
            c_is += gamma[q]
    if c_is > 0:
        lc = math.log(c_is)
        for n in range(m + 1):
            lg[n] = n * lc - math.lgamma(n + 1.0)
    for q in range(gamma.shape[0]):
        if not is_station[q] or gamma[q] <= 0:
            continue
        lc = math.log(gamma[q])
        for n in range(1, m + 1):
            a = lg[n]
            b = lc + lg[n - 1]
            if a < b:
                a, b = b, a
            if b > -np.inf:
                lg[n] = a + math.log1p(math.exp(b - a))
            else:
                lg[n] = a
    return lg


def _convolve_numpy(gamma, is_station, m):
    n = np.arange(m + 1, dtype=float)
    lg = np.full(m + 1, -np.inf)
    lg[0] = 0.0
    c_is = gamma[~is_station].sum()
    if c_is > 0:
        lg = n * math.log(c_is) - gammaln(n + 1.0)
    for q in np.flatnonzero(is_station & (gamma > 0)):
        lc = math.log(gamma[q])
        # lg'[n] - n lc is a running log-sum of lg[x] - x lc
        with np.errstate(invalid="ignore"):
            lg = np.logaddexp.accumulate(lg - n * lc) + n * lc
    return lg


def convolve_constants(gamma, is_station, m):
    """``log G(n)`` for n = 0..m by sequential convolution over the queues."""
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    is_station = np.ascontiguousarray(is_station, dtype=np.bool_)
    if USE_NUMBA:
        return _convolve_numba(gamma, is_station, int(m))
    return _convolve_numpy(gamma, is_station, int(m))
