"""Killed Markov process models.

A killed Markov process lives on an interior state space F plus an absorbing
cemetery point; once a trajectory hits the cemetery it stays there.  Two
concrete model families are provided:

* :class:`CtmcModel` -- finite-state continuous-time Markov chains specified
  by a sub-generator matrix.  Trajectories are simulated exactly by the jump
  chain (exponential holding times, jump/kill split by rates), so there is no
  discretization bias and every distributional quantity is computable in
  closed form from the matrix exponential (see :mod:`fvlab.oracle`).
* :class:`DiffusionModel` -- 1-d diffusions discretized with fixed-step
  Euler-Maruyama, killed on leaving a box and/or by a state-dependent rate
  checked at grid points.  This scheme is biased; it is meant for
  demonstration only and has no exact oracle.

Trajectories are returned as :class:`SkeletonSegment` objects that store the
full jump skeleton, so the state at any intermediate time can be queried
deterministically without re-simulation.

Models are immutable after construction; all randomness flows through
caller-supplied ``numpy.random.Generator`` streams, so models can be shared
freely across threads.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from functools import partial

import numpy as np

__all__ = [
    "CEMETERY",
    "is_cemetery",
    "TestFunction",
    "SkeletonSegment",
    "CtmcModel",
    "DiffusionModel",
    "pure_death",
    "random_ctmc",
    "sample_initial",
    "advance_with_skeleton",
    "model_from_dict",
    "load_model",
]


class _Cemetery:
    """Unique absorbing graveyard state."""

    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "CEMETERY"


CEMETERY = _Cemetery()


def is_cemetery(state):
    """True iff ``state`` is the absorbing cemetery point."""
    return state is CEMETERY


class TestFunction:
    """Bounded observable on the interior states, zero at the cemetery.

    Parameters
    ----------
    name : str
        Identifier used as key in run records and reports.
    fn : callable
        Map from an interior state to a float.  Never sees the cemetery.
    sup_norm : float
        Bound on ``|fn|`` over reachable interior states.
    values : array_like, optional
        For finite-state models, the per-state value table.  Enables
        vectorized evaluation in the engine and exact moments in the oracle.
    """

    __slots__ = ("name", "sup_norm", "values", "_fn")
    __test__ = False  # not a test case despite the Test* name

    def __init__(self, name, fn, sup_norm, values=None):
        if sup_norm < 0:
            raise ValueError("sup_norm must be >= 0")
        self.name = str(name)
        self._fn = fn
        self.sup_norm = float(sup_norm)
        self.values = None if values is None else np.asarray(values, dtype=float)

    @classmethod
    def from_vector(cls, name, values):
        """Test function on a finite state space given by its value table."""
        values = np.asarray(values, dtype=float)
        return cls(name, lambda i: values[i], float(np.max(np.abs(values), initial=0.0)),
                   values=values)

    def evaluate(self, state):
        """Value at ``state``; the cemetery always maps to 0."""
        if state is CEMETERY:
            return 0.0
        return float(self._fn(state))

    __call__ = evaluate

    def __repr__(self):
        return f"TestFunction({self.name!r}, sup_norm={self.sup_norm})"


class SkeletonSegment:
    """Piecewise-constant trajectory skeleton on ``[t_from, t_cap]``.

    ``times[k]`` is the time at which the trajectory enters ``states[k]``;
    the path is right-continuous and constant between recorded times.  If the
    trajectory is killed, ``death_time`` is set and the state at any
    ``t >= death_time`` is the cemetery.
    """

    __slots__ = ("t_from", "t_cap", "times", "states", "death_time")

    def __init__(self, t_from, t_cap, times, states, death_time=None):
        self.t_from = t_from
        self.t_cap = t_cap
        self.times = times
        self.states = states
        self.death_time = death_time

    @property
    def survived(self):
        """True iff the trajectory reached ``t_cap`` alive."""
        return self.death_time is None

    def state_at(self, t):
        """State at time ``t`` (right-continuous; cemetery from death on)."""
        if t < self.t_from:
            raise ValueError(f"t={t} before segment start {self.t_from}")
        if self.death_time is not None and t >= self.death_time:
            return CEMETERY
        # bisect_right gives the index of the last entry time <= t
        return self.states[bisect_right(self.times, t) - 1]

    def last_interior_state(self):
        """Most recent interior state (used for simultaneous-death rebirth)."""
        return self.states[-1]


def _check_stochastic_vector(law, what):
    law = np.asarray(law, dtype=float)
    if law.ndim != 1:
        raise ValueError(f"{what} must be a vector")
    if np.any(law < 0):
        raise ValueError(f"{what} has negative entries")
    if abs(law.sum() - 1.0) > 1e-12:
        raise ValueError(f"{what} must sum to 1 within 1e-12 (got {law.sum()!r})")
    return law


class CtmcModel:
    """Finite-state CTMC with killing, specified by its sub-generator.

    The sub-generator ``A`` has nonnegative off-diagonal jump rates and
    nonpositive row sums; the row-sum deficit is the per-state killing rate
    ``kappa[i] = -sum_j A[i, j]``.  The survival semigroup is
    ``exp(t A)`` acting on functions, and trajectories are simulated exactly
    through the embedded jump chain.
    """

    has_oracle = True

    def __init__(self, sub_generator, initial_law):
        A = np.array(sub_generator, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("sub_generator must be a square matrix")
        n = A.shape[0]
        off = A.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            raise ValueError("off-diagonal rates must be >= 0")
        if np.any(np.diag(A) > 0):
            raise ValueError("diagonal entries must be <= 0")
        kappa = -A.sum(axis=1)
        if np.any(kappa < -1e-12):
            raise ValueError("row sums must be <= 0 (killing rates >= 0)")
        self.sub_generator = A
        self.sub_generator.setflags(write=False)
        self.n_states = n
        self.killing_rates = np.clip(kappa, 0.0, None)
        self.initial_law = _check_stochastic_vector(initial_law, "initial_law")
        self.initial_law.setflags(write=False)

        # Jump-chain tables: per state, the total exit rate and the cumulative
        # split over (jump targets..., kill).  Kill is encoded as target == n.
        # Plain lists + bisect beat numpy searchsorted at these sizes.
        total = off.sum(axis=1) + self.killing_rates
        cum = np.concatenate([off, self.killing_rates[:, None]], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cum = np.cumsum(cum, axis=1)
            cum /= np.where(total > 0, total, 1.0)[:, None]
        cum[:, -1] = 1.0 + 1e-12  # guard against roundoff at the right edge
        self._total_rate = total.tolist()
        self._cum_events = [row.tolist() for row in cum]
        cum_init = np.cumsum(self.initial_law)
        cum_init[-1] = 1.0 + 1e-12
        self._cum_initial = cum_init.tolist()

    def sample_initial(self, rng):
        """Draw an interior state index from the initial law."""
        return bisect_right(self._cum_initial, rng.random())

    def advance_with_skeleton(self, state, t_from, t_cap, rng):
        """Exact jump-chain trajectory from ``(t_from, state)`` up to ``t_cap``.

        Holding times are exponential with the state's total exit rate; at
        each event the chain jumps or is killed proportionally to the rates.
        ``t_cap`` may be ``math.inf`` provided killing is reachable.
        """
        times = [t_from]
        states = [state]
        t = t_from
        total_rate = self._total_rate
        cum_events = self._cum_events
        n = self.n_states
        exponential = rng.exponential
        uniform = rng.random
        while True:
            lam = total_rate[state]
            if lam <= 0.0:
                return SkeletonSegment(t_from, t_cap, times, states)
            t = t + exponential() / lam
            if t > t_cap:
                return SkeletonSegment(t_from, t_cap, times, states)
            nxt = bisect_right(cum_events[state], uniform())
            if nxt == n:
                return SkeletonSegment(t_from, t_cap, times, states, death_time=t)
            state = nxt
            times.append(t)
            states.append(state)

    def test_function(self, name):
        """Resolve a named observable: ``"alive"`` or ``"state:<k>"``."""
        if name == "alive":
            return TestFunction.from_vector("alive", np.ones(self.n_states))
        if name.startswith("state:"):
            k = int(name.split(":", 1)[1])
            if not 0 <= k < self.n_states:
                raise ValueError(f"state index {k} out of range")
            v = np.zeros(self.n_states)
            v[k] = 1.0
            return TestFunction.from_vector(name, v)
        raise ValueError(f"unknown test function {name!r} for CTMC model")

    def to_dict(self):
        return {
            "type": "ctmc",
            "sub_generator": self.sub_generator.tolist(),
            "initial_law": self.initial_law.tolist(),
        }


def pure_death(rate):
    """One-state model killed at the given exponential rate."""
    return CtmcModel([[-float(rate)]], [1.0])


def random_ctmc(n_states, rng, jump_range=(0.05, 0.4), killing_range=(0.2, 0.8)):
    """Random irreducible CTMC with strictly positive killing everywhere.

    Off-diagonal rates and killing rates are drawn uniformly from the given
    ranges, and the initial law is a random point of the simplex bounded away
    from the faces.  Every state kills, so the survival probability is
    strictly decreasing.
    """
    A = rng.uniform(*jump_range, size=(n_states, n_states))
    np.fill_diagonal(A, 0.0)
    kappa = rng.uniform(*killing_range, size=n_states)
    np.fill_diagonal(A, -(A.sum(axis=1) + kappa))
    law = rng.uniform(0.2, 1.0, size=n_states)
    law /= law.sum()
    return CtmcModel(A, law)


def _zero_drift(x, t):
    return 0.0


def _linear_drift(x, t, slope, intercept):
    return slope * x + intercept


def _constant_rate(x, rate):
    return rate


# registry entries return picklable callables (module functions / partials),
# so JSON-built diffusion models survive process-pool replication
_DRIFTS = {
    "zero": lambda p: _zero_drift,
    "linear": lambda p: partial(_linear_drift, slope=p.get("slope", -1.0),
                                intercept=p.get("intercept", 0.0)),
}


class DiffusionModel:
    """1-d diffusion with Euler-Maruyama steps and grid-checked killing.

    Killing happens when a step leaves ``box`` and/or, if ``kill_rate`` is
    set, with probability ``1 - exp(-kill_rate(x) h)`` per step.  Deaths are
    only detected at grid points, so this scheme is biased and simultaneous
    deaths across particles are possible; it is intended for demonstration
    runs, never for oracle comparisons.
    """

    has_oracle = False

    def __init__(self, drift, diffusion_coeff, step_size, initial,
                 box=None, kill_rate=None, drift_spec=None):
        if step_size <= 0:
            raise ValueError("step_size must be > 0")
        if diffusion_coeff <= 0:
            raise ValueError("diffusion_coeff must be > 0")
        if box is None and kill_rate is None:
            raise ValueError("diffusion model needs a box barrier or a kill rate")
        if box is not None:
            lo, hi = float(box[0]), float(box[1])
            if not lo < hi:
                raise ValueError("barrier box must be nonempty")
            box = (lo, hi)
        self.drift = drift
        self.diffusion_coeff = float(diffusion_coeff)
        self.step_size = float(step_size)
        self.box = box
        self.kill_rate = kill_rate
        self.initial = dict(initial)
        self.drift_spec = drift_spec  # kept for JSON round-trips / pickling

    def sample_initial(self, rng):
        kind = self.initial.get("kind", "point")
        if kind == "point":
            return float(self.initial["x"])
        if kind == "uniform":
            return float(rng.uniform(self.initial["low"], self.initial["high"]))
        if kind == "gaussian":
            return float(self.initial["mean"] + self.initial["std"] * rng.standard_normal())
        raise ValueError(f"unknown initial sampler {kind!r}")

    def advance_with_skeleton(self, state, t_from, t_cap, rng):
        if not math.isfinite(t_cap):
            raise ValueError("diffusion segments need a finite time cap")
        h = self.step_size
        sqh = math.sqrt(h) * self.diffusion_coeff
        times = [t_from]
        states = [float(state)]
        t, x = t_from, float(state)
        while t < t_cap - 1e-12 * max(1.0, abs(t_cap)):
            step = min(h, t_cap - t)
            x = x + self.drift(x, t) * step + sqh * math.sqrt(step / h) * rng.standard_normal()
            t = t + step
            if self.box is not None and not (self.box[0] < x < self.box[1]):
                return SkeletonSegment(t_from, t_cap, times, states, death_time=t)
            if self.kill_rate is not None:
                if rng.random() > math.exp(-self.kill_rate(x) * step):
                    return SkeletonSegment(t_from, t_cap, times, states, death_time=t)
            times.append(t)
            states.append(x)
        return SkeletonSegment(t_from, t_cap, times, states)

    def test_function(self, name):
        if name == "alive":
            return TestFunction("alive", lambda s: 1.0, 1.0)
        if name == "coord":
            if self.box is None:
                raise ValueError("coordinate observable needs a bounding box")
            bound = max(abs(self.box[0]), abs(self.box[1]))
            return TestFunction("coord", lambda x: float(x), bound)
        raise ValueError(f"unknown test function {name!r} for diffusion model")


def sample_initial(model, rng):
    """Draw one interior initial state from the model's initial law."""
    return model.sample_initial(rng)


def advance_with_skeleton(model, state, t_from, t_cap, rng):
    """Simulate one trajectory segment on ``[t_from, t_cap]``.

    Returns a :class:`SkeletonSegment` that either survived to ``t_cap`` or
    records its death time; the segment answers ``state_at(t)`` queries for
    any ``t`` in between.  Two calls with identically seeded generators
    produce identical segments.
    """
    if is_cemetery(state):
        raise ValueError("cannot advance a trajectory from the cemetery")
    if t_from >= t_cap:
        raise ValueError(f"need t_from < t_cap, got {t_from} >= {t_cap}")
    return model.advance_with_skeleton(state, t_from, t_cap, rng)


def model_from_dict(spec):
    """Build a model from its JSON dictionary form.

    Recognized shapes::

        {"type": "ctmc", "sub_generator": [[...]], "initial_law": [...]}
        {"type": "pure_death", "rate": lam}
        {"type": "diffusion", "drift": {"name": ..., ...},
         "diffusion_coeff": s, "step_size": h, "box": [lo, hi],
         "kill_rate": c, "initial": {"kind": ..., ...}}
    """
    kind = spec.get("type")
    if kind == "ctmc":
        return CtmcModel(spec["sub_generator"], spec["initial_law"])
    if kind == "pure_death":
        return pure_death(spec["rate"])
    if kind == "diffusion":
        drift_spec = spec.get("drift", {"name": "zero"})
        name = drift_spec.get("name", "zero")
        if name not in _DRIFTS:
            raise ValueError(f"unknown drift {name!r}")
        drift = _DRIFTS[name](drift_spec)
        rate = spec.get("kill_rate")
        kill = None if rate is None else partial(_constant_rate, rate=float(rate))
        return DiffusionModel(
            drift,
            spec["diffusion_coeff"],
            spec["step_size"],
            spec.get("initial", {"kind": "point", "x": 0.0}),
            box=spec.get("box"),
            kill_rate=kill,
            drift_spec=drift_spec,
        )
    raise ValueError(f"unknown model type {kind!r}")


def load_model(path_or_dict):
    """Load a model from a JSON file path or an already-parsed dictionary."""
    if isinstance(path_or_dict, dict):
        return model_from_dict(path_or_dict)
    with open(path_or_dict) as fh:
        return model_from_dict(json.load(fh))
