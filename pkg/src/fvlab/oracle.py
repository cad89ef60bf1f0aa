"""Exact reference quantities for finite-state killed Markov chains.

Everything the particle system estimates is computable in closed form for a
:class:`~fvlab.models.CtmcModel` from its sub-generator A:

* the sub-Markov semigroup ``Q^t = exp(tA)`` (uniformization, no external
  matrix-exponential dependency),
* the survival curve ``p_t = initial_law . exp(tA) . 1`` and the quantile
  times ``t_j`` solving ``p(t_j) = theta**j``,
* the asymptotic variance of the synchronized-branching estimator in its two
  algebraically equivalent formulations (corrected measures along quantiles,
  and predicted pre-branching measures), which serve as mutual cross-checks,
* the classical single-rebirth asymptotic variance (a quadrature over the
  whole time axis),
* the closed-form relative-variance bounds, the lower-bound profile
  ``h(theta)``, and the asymptotic cost model.

Throughout, ``eta_t = gamma_t / rho_t`` denotes the branching-normalized
measure (mass < 1 between quantiles, with the missing mass sitting at the
cemetery where observables vanish), while the classical-variance formula uses
the conditional law ``gamma_t / p_t``.  The two conventions are computed from
the same semigroup vectors with different normalizers; mixing them up is the
classic mistake, hence the explicit helpers below.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .models import CtmcModel, TestFunction

__all__ = [
    "BoundaryWarning",
    "DegenerateQuantileError",
    "QuadratureError",
    "QuantileGrid",
    "ObservableReport",
    "OracleReport",
    "semigroup_apply",
    "survival_probability",
    "survival_derivative",
    "survival_curve",
    "quantile_times",
    "sigma2_sync",
    "sigma2_sync_alt",
    "sigma2_classical",
    "relative_variance_bounds",
    "h_theta",
    "cost_model",
    "compute_oracle_report",
]

#: flag set on a QuantileGrid when no mass is lost by the horizon
NO_MASS_LOST = "p_T=1"
#: flag when the residual level r falls within 0.05 of {theta, 1}
BOUNDARY_R = "boundary_r"
#: flag when log p_T / log theta sits within 1e-9 of an integer
NEAR_INTEGER = "near_integer_log_ratio"


class BoundaryWarning(UserWarning):
    """The configuration sits close to a fragile boundary case."""


class DegenerateQuantileError(RuntimeError):
    """The survival curve is flat across a requested quantile level."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


# ---------------------------------------------------------------------------
# semigroup
# ---------------------------------------------------------------------------

_POISSON_TAIL = 1e-13
_MAX_SERIES_RATE = 500.0  # split exp(tA) into substeps above this lambda*t


def _series_apply(P, mu, v):
    """Poisson-weighted power series  sum_k e^-mu mu^k/k! P^k v."""
    weight = math.exp(-mu)
    acc = weight * v
    cum = weight
    vk = v
    k = 0
    while cum < 1.0 - _POISSON_TAIL:
        k += 1
        vk = P @ vk
        weight *= mu / k
        acc = acc + weight * vk
        cum += weight
        if k > 100_000:
            raise QuadratureError("uniformization series failed to converge")
    return acc


def _expm_apply(A, t, v, transpose=False):
    """exp(tA) v (or exp(tA^T) v) by uniformization with adaptive truncation."""
    lam = float(np.max(-np.diag(A)))
    v = np.asarray(v, dtype=float)
    if lam * t == 0.0:
        return v.copy()
    P = np.eye(A.shape[0]) + A / lam
    if transpose:
        P = P.T
    steps = int(lam * t // _MAX_SERIES_RATE) + 1
    mu = lam * t / steps
    out = v
    for _ in range(steps):
        out = _series_apply(P, mu, out)
    return out


def _phi_vector(ctmc, phi):
    """Per-state value table of an observable (cemetery value 0 implied)."""
    if isinstance(phi, TestFunction):
        if phi.values is not None:
            return np.asarray(phi.values, dtype=float)
        return np.array([phi.evaluate(i) for i in range(ctmc.n_states)])
    return np.asarray(phi, dtype=float)


def semigroup_apply(ctmc, t, phi_vector):
    """Entrywise ``Q^t phi = exp(t A) phi`` for a sub-generator A."""
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    return _expm_apply(ctmc.sub_generator, t, np.asarray(phi_vector, dtype=float))


def gamma_vector(ctmc, t):
    """Unnormalized law on the interior states: ``initial_law . exp(tA)``."""
    return _expm_apply(ctmc.sub_generator, t, ctmc.initial_law, transpose=True)


def survival_probability(ctmc, t):
    """p_t = P(still alive at t) = initial_law . exp(tA) . 1."""
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    return float(gamma_vector(ctmc, t).sum())


def survival_derivative(ctmc, t):
    """dp_t/dt = initial_law . exp(tA) . A . 1  (nonpositive)."""
    return float(gamma_vector(ctmc, t) @ ctmc.sub_generator @ np.ones(ctmc.n_states))


def survival_curve(ctmc, T, points=201):
    """Sampled (t, p_t) curve on [0, T]."""
    ts = np.linspace(0.0, T, points)
    return ts, np.array([survival_probability(ctmc, t) for t in ts])


# ---------------------------------------------------------------------------
# quantile grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantileGrid:
    """Quantile times of the survival curve at powers of theta.

    ``t_levels[j-1]`` solves ``p(t_j) = theta**j`` for j = 1..j_max with
    ``j_max = floor(log p_T / log theta)`` and residual
    ``r = p_T * theta**-j_max`` in (theta, 1).  When no mass is lost
    (``p_T = 1``) the grid is empty, r is None, and the ``p_T=1`` flag is
    set.
    """

    theta: float
    t_levels: tuple
    j_max: int
    r: float | None
    p_T: float
    flags: tuple = ()


def _solve_level(p_of_t, level, ts, ps, tol):
    """Bisection for p(t) = level inside its bracketing grid cell."""
    # a flat run of the curve at the target level makes the quantile non-unique
    if int(np.count_nonzero(ps == level)) >= 2:
        raise DegenerateQuantileError(
            f"survival curve is flat at level {level!r}; quantile not unique")
    idx = int(np.searchsorted(-ps, -level, side="left"))
    idx = min(max(idx, 1), len(ps) - 1)
    lo, hi = ts[idx - 1], ts[idx]
    p_lo, p_hi = ps[idx - 1], ps[idx]
    if p_lo == p_hi:
        raise DegenerateQuantileError(
            f"survival curve is flat at level {level!r}; quantile not unique")
    if not (p_lo >= level >= p_hi):
        # level sits exactly on a grid point boundary; widen by one cell
        lo, hi = ts[max(idx - 2, 0)], ts[min(idx + 1, len(ts) - 1)]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if p_of_t(mid) >= level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def quantile_times(ctmc, theta, T, tol=1e-12, grid_points=513):
    """Quantile grid of the survival curve for the given theta and horizon.

    Raises
    ------
    DegenerateQuantileError
        If the survival curve is flat across one of the target levels
        (checked on a ``grid_points`` grid), i.e. strict decrease fails
        where it is needed.

    Warns
    -----
    BoundaryWarning
        When the residual level r is within 0.05 of theta or of 1, or when
        ``log p_T / log theta`` is within 1e-9 of an integer; the grid's
        ``flags`` record the same conditions.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0,1), got {theta}")
    if T <= 0:
        raise ValueError(f"horizon must be > 0, got {T}")
    p_T = survival_probability(ctmc, T)
    # a chain without killing keeps mass 1 exactly; the series evaluation may
    # sit a few truncation errors below that, so test the rates structurally
    if np.all(ctmc.killing_rates == 0.0) or p_T >= 1.0 - 1e-12:
        return QuantileGrid(theta=theta, t_levels=(), j_max=0, r=None, p_T=1.0,
                            flags=(NO_MASS_LOST,))

    flags = []
    log_ratio = math.log(p_T) / math.log(theta)
    if abs(log_ratio - round(log_ratio)) < 1e-9:
        flags.append(NEAR_INTEGER)
        warnings.warn(
            f"log p_T/log theta = {log_ratio!r} is within 1e-9 of an integer; "
            "the residual level r is ill-conditioned here", BoundaryWarning,
            stacklevel=2)
    j_max = int(math.floor(log_ratio))
    r = p_T * theta ** (-j_max)
    if abs(r - theta) < 0.05 or abs(r - 1.0) < 0.05:
        flags.append(BOUNDARY_R)
        warnings.warn(
            f"residual level r = {r:.4f} is within 0.05 of the boundary "
            f"{{theta={theta}, 1}}; quantile-comparison tests are fragile here",
            BoundaryWarning, stacklevel=2)

    ts = np.linspace(0.0, T, grid_points)
    ps = np.array([survival_probability(ctmc, t) for t in ts])
    if np.any(np.diff(ps) > 1e-12):
        raise DegenerateQuantileError("survival curve is not non-increasing")

    p_of_t = lambda t: survival_probability(ctmc, t)
    levels = []
    for j in range(1, j_max + 1):
        tj = _solve_level(p_of_t, theta ** j, ts, ps, tol)
        if abs(p_of_t(tj) - theta ** j) > 1e-10:
            raise DegenerateQuantileError(
                f"quantile solve for level theta**{j} did not meet 1e-10")
        levels.append(tj)
    return QuantileGrid(theta=theta, t_levels=tuple(levels), j_max=j_max, r=r,
                        p_T=p_T, flags=tuple(flags))


# ---------------------------------------------------------------------------
# asymptotic variances
# ---------------------------------------------------------------------------


def _moments(measure, values):
    """(mean, variance) of ``values`` under a (sub-)probability vector whose
    missing mass sits at the cemetery, where values vanish."""
    m = float(measure @ values)
    return m, float(measure @ (values ** 2)) - m * m


def quantile_variance_terms(ctmc, phi, grid, T):
    """V_{eta_{t_j}}(Q^{T-t_j} phi) for j = 1..j_max (conditional laws)."""
    values = _phi_vector(ctmc, phi)
    out = []
    for j, tj in enumerate(grid.t_levels, start=1):
        eta_j = gamma_vector(ctmc, tj) / grid.theta ** j
        u = semigroup_apply(ctmc, T - tj, values)
        out.append(_moments(eta_j, u)[1])
    return out


def sigma2_sync(ctmc, phi, theta, T, grid=None):
    """Asymptotic variance of sqrt(N)(gamma_T^N(phi) - gamma_T(phi)) for the
    synchronized system with K/N -> 1-theta.

    theta**(2 jmax) [ V_{eta_T}(phi) + jmax (1/theta - 1) eta_T(phi)^2 ]
    + sum_j V_{eta_{t_j}}(Q^{T-t_j} phi) (theta**(2j-1) - theta**(2j+1)),

    with eta_T = gamma_T / theta**jmax carrying mass r on the interior.
    """
    if grid is None:
        grid = quantile_times(ctmc, theta, T)
    values = _phi_vector(ctmc, phi)
    j_max = grid.j_max
    eta_T = gamma_vector(ctmc, T) / theta ** j_max
    mean_T, var_T = _moments(eta_T, values)
    total = theta ** (2 * j_max) * (var_T + j_max * (1.0 / theta - 1.0) * mean_T ** 2)
    for j, vterm in enumerate(quantile_variance_terms(ctmc, values, grid, T), start=1):
        total += vterm * (theta ** (2 * j - 1) - theta ** (2 * j + 1))
    return total


def sigma2_sync_alt(ctmc, phi, theta, T, grid=None):
    """Same limit variance through predicted (pre-branching) measures.

    sum_{j=0..jmax} theta**(2j) V_{pred_{t_{j+1}}}(Q^{T-t_{j+1}} phi)
    - sum_{j=1..jmax} theta**(2j+1) V_{eta_{t_j}}(Q^{T-t_j} phi),

    where pred_{t_{j+1}} = eta_{t_j} Q^{t_{j+1}-t_j} = gamma_{t_{j+1}} /
    theta**j (mass theta on the interior, the rest at the cemetery) and
    t_{jmax+1} = T.  Must agree with :func:`sigma2_sync` to roundoff; the two
    routes share no algebra beyond the semigroup itself.
    """
    if grid is None:
        grid = quantile_times(ctmc, theta, T)
    values = _phi_vector(ctmc, phi)
    j_max = grid.j_max
    times = list(grid.t_levels) + [T]
    total = 0.0
    for j in range(j_max + 1):
        t_next = times[j]
        pred = gamma_vector(ctmc, t_next) / theta ** j
        u = semigroup_apply(ctmc, T - t_next, values)
        total += theta ** (2 * j) * _moments(pred, u)[1]
    for j, tj in enumerate(grid.t_levels, start=1):
        eta_j = gamma_vector(ctmc, tj) / theta ** j
        u = semigroup_apply(ctmc, T - tj, values)
        total -= theta ** (2 * j + 1) * _moments(eta_j, u)[1]
    return total


def _adaptive_simpson(f, a, b, tol, max_depth=48):
    """Adaptive Simpson quadrature to absolute tolerance ``tol``."""
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        if depth <= 0:
            raise QuadratureError("adaptive Simpson did not converge")
        return (recurse(a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(m, b, fm, frm, fb, right, 0.5 * tol, depth - 1))

    return recurse(a, b, fa, fm, fb, whole, tol, max_depth)


def sigma2_classical(ctmc, phi, T, tol=1e-9):
    """Asymptotic variance for the classical single-rebirth system (K = 1).

    p_T^2 V_{cond_T}(phi) - p_T^2 log(p_T) cond_T(phi)^2
    - 2 int_0^T V_{cond_t}(Q^{T-t} phi) p_t dp_t,

    where cond_t = gamma_t / p_t is the law conditioned on survival (note the
    normalizer differs from the branching convention used by
    :func:`sigma2_sync`).  The integral is evaluated with dp_t = p'_t dt,
    the derivative taken exactly from the sub-generator, by adaptive Simpson
    refined to ``tol`` absolute.
    """
    values = _phi_vector(ctmc, phi)
    A = ctmc.sub_generator
    ones = np.ones(ctmc.n_states)

    def integrand(t):
        g = gamma_vector(ctmc, t)
        p = float(g.sum())
        cond = g / p
        u = semigroup_apply(ctmc, T - t, values)
        var = _moments(cond, u)[1]
        dp = float(g @ A @ ones)
        return var * p * dp

    g_T = gamma_vector(ctmc, T)
    p_T = float(g_T.sum())
    cond_T = g_T / p_T
    mean_T, var_T = _moments(cond_T, values)
    integral = _adaptive_simpson(integrand, 0.0, T, tol)
    return p_T ** 2 * var_T - p_T ** 2 * math.log(p_T) * mean_T ** 2 - 2.0 * integral


# ---------------------------------------------------------------------------
# closed-form bounds, profile, and cost
# ---------------------------------------------------------------------------


def _floor_log_ratio(p_T, theta):
    log_ratio = math.log(p_T) / math.log(theta)
    if 0.0 < p_T < 1.0 and abs(log_ratio - round(log_ratio)) < 1e-9:
        warnings.warn(
            f"log p_T/log theta = {log_ratio!r} is within 1e-9 of an integer",
            BoundaryWarning, stacklevel=3)
    return int(math.floor(log_ratio))


def relative_variance_bounds(p_T, theta):
    """Closed-form window for the relative variance sigma^2(alive)/p_T^2.

    lower = jmax (1-theta)/theta + (1-r)/r
    upper = (1+theta)/p_T - (theta+r)/r - jmax (1-theta)

    The lower bound is attained when, from every quantile level, the
    probability of surviving to T is constant on the level's support; it is
    also the variance of the idealized product estimator that measures each
    theta-level and the residual r independently.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0,1), got {theta}")
    if p_T >= 1.0 or p_T <= 0.0:
        raise ValueError(f"need 0 < p_T < 1, got {p_T}")
    if p_T >= theta:
        warnings.warn(
            f"p_T = {p_T} is not below theta = {theta}; the bounds degenerate "
            "to the no-branching case", BoundaryWarning, stacklevel=2)
    j_max = _floor_log_ratio(p_T, theta)
    r = p_T * theta ** (-j_max)
    lower = j_max * (1.0 - theta) / theta + (1.0 - r) / r
    upper = (1.0 + theta) / p_T - (theta + r) / r - j_max * (1.0 - theta)
    return lower, upper


def h_theta(p_T, theta):
    """Lower-bound profile h(theta); non-increasing, with limit -log p_T at 1."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0,1), got {theta}")
    if not 0.0 < p_T < 1.0:
        raise ValueError(f"need 0 < p_T < 1, got {p_T}")
    j = math.floor(math.log(p_T) / math.log(theta))
    return j * (1.0 - theta) / theta + theta ** j / p_T - 1.0


def cost_model(p_T, theta, n_particles):
    """Asymptotic simulated-segment counts (synchronized, classical).

    Synchronized: N initial trajectories plus K ~ (1-theta)N rebranched at
    each of the jmax branchings.  Classical: N (1 - log p_T).
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0,1), got {theta}")
    if not 0.0 < p_T <= 1.0:
        raise ValueError(f"need 0 < p_T <= 1, got {p_T}")
    j_max = 0 if p_T == 1.0 else _floor_log_ratio(p_T, theta)
    cost_sync = n_particles * (1.0 + j_max * (1.0 - theta))
    cost_classical = n_particles * (1.0 - math.log(p_T))
    return cost_sync, cost_classical


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservableReport:
    """Exact quantities attached to one observable."""

    sigma2_sync: float
    sigma2_sync_alt: float
    sigma2_classical: float
    variance_terms: tuple
    gamma_T: float
    cond_mean: float            # gamma_T(phi) / p_T
    sigma2_eta_norm: float      # variance of the normalized-ratio CLT


@dataclass(frozen=True)
class OracleReport:
    """Everything exactly computable for one (model, theta, T) benchmark."""

    theta: float
    horizon: float
    p_T: float
    grid: QuantileGrid
    observables: dict
    eta_levels: tuple
    rel_var_lower: float | None
    rel_var_upper: float | None
    h_curve: dict
    cost_sync: float | None
    cost_classical: float | None
    n_particles: int | None
    flags: tuple = ()

    def to_dict(self):
        return {
            "theta": self.theta,
            "horizon": self.horizon,
            "p_T": self.p_T,
            "quantiles": {
                "t_levels": list(self.grid.t_levels),
                "j_max": self.grid.j_max,
                "r": self.grid.r,
                "flags": list(self.grid.flags),
            },
            "observables": {
                name: {
                    "sigma2_sync": o.sigma2_sync,
                    "sigma2_sync_alt": o.sigma2_sync_alt,
                    "sigma2_classical": o.sigma2_classical,
                    "variance_terms": list(o.variance_terms),
                    "gamma_T": o.gamma_T,
                    "cond_mean": o.cond_mean,
                    "sigma2_eta_norm": o.sigma2_eta_norm,
                }
                for name, o in self.observables.items()
            },
            "eta_levels": [list(v) for v in self.eta_levels],
            "rel_var_lower": self.rel_var_lower,
            "rel_var_upper": self.rel_var_upper,
            "h_curve": {k: list(v) for k, v in self.h_curve.items()},
            "cost_sync": self.cost_sync,
            "cost_classical": self.cost_classical,
            "n_particles": self.n_particles,
            "flags": list(self.flags),
        }


def compute_oracle_report(ctmc, theta, T, test_functions=("alive",),
                          n_particles=None, h_grid=None):
    """Assemble the full exact report for a CTMC benchmark.

    ``test_functions`` may be names resolvable by the model or TestFunction
    objects.  ``h_grid`` defaults to theta in 0.05..0.95 step 0.01.
    """
    if not isinstance(ctmc, CtmcModel):
        raise TypeError("exact oracle reports require a finite-state CTMC model")
    grid = quantile_times(ctmc, theta, T)
    p_T = grid.p_T

    tfs = []
    for tf in test_functions:
        tfs.append(tf if isinstance(tf, TestFunction) else ctmc.test_function(tf))

    alive_values = np.ones(ctmc.n_states)
    g_T = gamma_vector(ctmc, T)
    observables = {}
    for tf in tfs:
        values = _phi_vector(ctmc, tf)
        gamma_T_phi = float(g_T @ values)
        cond_mean = gamma_T_phi / p_T
        centered = values - cond_mean * alive_values
        observables[tf.name] = ObservableReport(
            sigma2_sync=sigma2_sync(ctmc, values, theta, T, grid=grid),
            sigma2_sync_alt=sigma2_sync_alt(ctmc, values, theta, T, grid=grid),
            sigma2_classical=sigma2_classical(ctmc, values, T),
            variance_terms=tuple(quantile_variance_terms(ctmc, values, grid, T)),
            gamma_T=gamma_T_phi,
            cond_mean=cond_mean,
            sigma2_eta_norm=sigma2_sync(ctmc, centered, theta, T, grid=grid) / p_T ** 2,
        )

    eta_levels = tuple(
        tuple(gamma_vector(ctmc, tj) / theta ** j)
        for j, tj in enumerate(grid.t_levels, start=1)
    )

    if NO_MASS_LOST in grid.flags:
        rel_lower = rel_upper = None
        cost_sync_total, cost_classical_total = cost_model(1.0, theta, n_particles or 1)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryWarning)
            rel_lower, rel_upper = relative_variance_bounds(p_T, theta)
            cost_sync_total, cost_classical_total = cost_model(p_T, theta, n_particles or 1)
    if n_particles is None:
        cost_sync_total = cost_classical_total = None

    if h_grid is None:
        h_grid = np.arange(0.05, 0.9501, 0.01)
    h_values = ([] if NO_MASS_LOST in grid.flags
                else [h_theta(p_T, th) for th in h_grid])
    h_curve = {"theta": list(np.asarray(h_grid, dtype=float)), "h": list(h_values)}

    return OracleReport(
        theta=theta, horizon=T, p_T=p_T, grid=grid, observables=observables,
        eta_levels=eta_levels, rel_var_lower=rel_lower, rel_var_upper=rel_upper,
        h_curve=h_curve, cost_sync=cost_sync_total,
        cost_classical=cost_classical_total, n_particles=n_particles,
        flags=grid.flags,
    )
