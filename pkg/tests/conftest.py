"""Shared fixtures: benchmark models, exact reports, and replica batches.

The heavy Monte Carlo batches (N = 10^4, M = 400) are session-scoped and
shared between the acceptance suite and the statistics tests.  Reference
quantities used in assertions are computed here with scipy (dense matrix
exponentials, adaptive quadrature, Brent root finding), independently of the
package's own uniformization / bisection / Simpson code paths.
"""

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.optimize import brentq

from fvlab import (CtmcModel, FVConfig, compute_oracle_report, pure_death,
                   run_replicas)

THETA = 0.5
PURE_DEATH_T = 3.0
TWO_STATE_T = 1.0
FIVE_STATE_T = 2.5

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

N_JOBS = max(1, min(4, os.cpu_count() or 1))


# ---------------------------------------------------------------------------
# scipy-based reference computations (test-side oracles)
# ---------------------------------------------------------------------------

def ref_gamma(model, t):
    """initial_law . exp(tA) via scipy's dense matrix exponential."""
    return model.initial_law @ expm(t * model.sub_generator)


def ref_survival(model, t):
    return float(ref_gamma(model, t).sum())


def ref_quantiles(model, theta, T):
    """(t_levels, j_max, r) solved with Brent's method on the scipy curve."""
    p_T = ref_survival(model, T)
    j_max = int(math.floor(math.log(p_T) / math.log(theta)))
    r = p_T * theta ** (-j_max)
    levels = [brentq(lambda t, j=j: ref_survival(model, t) - theta ** j,
                     1e-13, T, xtol=1e-13)
              for j in range(1, j_max + 1)]
    return levels, j_max, r


def _ref_moments(measure, values):
    m = float(measure @ values)
    return m, float(measure @ (values ** 2)) - m * m


def ref_sigma2_sync(model, values, theta, T):
    """Synchronized limit variance from scipy semigroup vectors."""
    values = np.asarray(values, dtype=float)
    levels, j_max, _ = ref_quantiles(model, theta, T)
    eta_T = ref_gamma(model, T) / theta ** j_max
    mean_T, var_T = _ref_moments(eta_T, values)
    total = theta ** (2 * j_max) * (var_T + j_max * (1 / theta - 1) * mean_T ** 2)
    for j, tj in enumerate(levels, start=1):
        eta_j = ref_gamma(model, tj) / theta ** j
        u = expm((T - tj) * model.sub_generator) @ values
        total += _ref_moments(eta_j, u)[1] * (theta ** (2 * j - 1) - theta ** (2 * j + 1))
    return total


def ref_sigma2_classical(model, values, T):
    """Classical limit variance via scipy quadrature (conditional laws)."""
    values = np.asarray(values, dtype=float)
    A = model.sub_generator
    ones = np.ones(model.n_states)

    def integrand(t):
        g = ref_gamma(model, t)
        p = g.sum()
        u = expm((T - t) * A) @ values
        var = _ref_moments(g / p, u)[1]
        return var * p * float(g @ A @ ones)

    g_T = ref_gamma(model, T)
    p_T = float(g_T.sum())
    mean_T, var_T = _ref_moments(g_T / p_T, values)
    integral = quad(integrand, 0.0, T, epsabs=1e-12, limit=300)[0]
    return p_T ** 2 * var_T - p_T ** 2 * math.log(p_T) * mean_T ** 2 - 2 * integral


# ---------------------------------------------------------------------------
# benchmark models
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def pure_death_model():
    return pure_death(1.0)


@pytest.fixture(scope="session")
def two_state_model():
    # q12 = q21 = 1, kappa = (0.5, 2), started in state 0
    return CtmcModel([[-1.5, 1.0], [1.0, -3.0]], [1.0, 0.0])


@pytest.fixture(scope="session")
def five_state_model():
    with open(CONFIG_DIR / "five_state.json") as fh:
        spec = json.load(fh)["model"]
    return CtmcModel(spec["sub_generator"], spec["initial_law"])


@pytest.fixture(scope="session")
def benchmarks(pure_death_model, two_state_model, five_state_model):
    """(name, model, horizon) triples covered by the acceptance criteria."""
    return (
        ("pure_death", pure_death_model, PURE_DEATH_T),
        ("two_state", two_state_model, TWO_STATE_T),
        ("five_state", five_state_model, FIVE_STATE_T),
    )


@pytest.fixture(scope="session")
def oracle_reports(benchmarks):
    return {
        name: compute_oracle_report(model, THETA, T, ("alive", "state:0"))
        for name, model, T in benchmarks
    }


# ---------------------------------------------------------------------------
# heavy replica batches (shared across test modules)
# ---------------------------------------------------------------------------


def _batch(model, T, seed, n_particles, *, theta=None, n_killed=None,
           test_functions=("alive",), n_replicas=400):
    config = FVConfig(n_particles=n_particles, horizon=T, seed=seed,
                      theta=theta, n_killed=n_killed, model=model,
                      test_functions=test_functions)
    return config, run_replicas(config, n_replicas, n_jobs=N_JOBS)


@pytest.fixture(scope="session")
def batch_pure_death_1e4(pure_death_model):
    import time
    start = time.perf_counter()
    config, records = _batch(pure_death_model, PURE_DEATH_T, 20240801, 10_000,
                             theta=THETA)
    return config, records, time.perf_counter() - start


@pytest.fixture(scope="session")
def batch_two_state_1e4(two_state_model):
    return _batch(two_state_model, TWO_STATE_T, 20240802, 10_000, theta=THETA,
                  test_functions=("alive", "state:0"))


@pytest.fixture(scope="session")
def batch_two_state_classical_1e4(two_state_model):
    return _batch(two_state_model, TWO_STATE_T, 20240803, 10_000, n_killed=1)


@pytest.fixture(scope="session")
def batch_five_state_1e4(five_state_model):
    return _batch(five_state_model, FIVE_STATE_T, 20240804, 10_000, theta=THETA)


@pytest.fixture(scope="session")
def batches_1e3(benchmarks):
    seeds = {"pure_death": 20240805, "two_state": 20240806, "five_state": 20240807}
    return {
        name: _batch(model, T, seeds[name], 1000, theta=THETA)
        for name, model, T in benchmarks
    }


@pytest.fixture(scope="session")
def batch_pure_death_classical_1e3(pure_death_model):
    return _batch(pure_death_model, PURE_DEATH_T, 20240808, 1000, n_killed=1)


@pytest.fixture(scope="session")
def batches_n_ladder(pure_death_model, batch_pure_death_1e4):
    """Pure-death batches at N = 2500, 5000, 10000 for the consistency check."""
    ladder = {
        2500: _batch(pure_death_model, PURE_DEATH_T, 20240809, 2500, theta=THETA),
        5000: _batch(pure_death_model, PURE_DEATH_T, 20240810, 5000, theta=THETA),
    }
    config, records, _ = batch_pure_death_1e4
    ladder[10_000] = (config, records)
    return ladder
