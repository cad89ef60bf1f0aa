"""Synchronized Fleming-Viot particle engine.

``run_fv`` evolves N particles of a killed Markov process, waits until K of
them are dead, rebirths the K dead ones uniformly (with replacement) onto the
N-K survivors, and repeats until the fixed horizon T.  From the number of
branchings B and the terminal empirical measure it produces the estimators

* ``rho = (1 - K/N)**B`` for the mass removed by branching,
* ``eta(phi) = (1/N) sum_n phi(X_T^n)`` with ``phi`` vanishing at the
  cemetery (dead-but-not-rebranched particles contribute 0),
* ``gamma(phi) = rho * eta(phi)`` and in particular the survival-probability
  estimate ``p_hat = gamma(alive)``,
* the normalized ratio ``eta(phi) / eta(alive)``.

Randomness is organized as one counter-based (Philox) stream per particle and
per epoch, where the epoch is the branching index that (re)started the
particle's current trajectory.  A run is therefore a deterministic function
of ``(config, seed)``, bit-identical in single-threaded mode and unchanged by
the threaded evolve phase, whose scheduling cannot affect which stream
produces which trajectory.

Trajectories are stored as full skeletons, so survivor states at a branching
time are queried from memory rather than re-simulated.
"""

from __future__ import annotations

import heapq
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .models import CEMETERY, TestFunction, is_cemetery, model_from_dict

__all__ = [
    "ConfigError",
    "NonTerminationError",
    "FVConfig",
    "EnsembleState",
    "FVRunRecord",
    "ParticleStreams",
    "batch_size_from_theta",
    "rho_estimator",
    "branch_step",
    "estimators_at_T",
    "run_fv",
]


class ConfigError(ValueError):
    """Invalid run configuration."""


class NonTerminationError(RuntimeError):
    """Branching count exceeded its ceiling; the run was aborted.

    With a sound model the number of branchings before T is almost surely
    finite; hitting the ceiling points at a misconfiguration (for instance a
    killing rate so large that rebirth locations die immediately).
    """


def batch_size_from_theta(theta, n_particles):
    """K = round((1-theta) N), clamped into [1, N-1]."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must be in (0,1), got {theta}")
    return min(max(int(round((1.0 - theta) * n_particles)), 1), n_particles - 1)


@dataclass(frozen=True)
class FVConfig:
    """Run configuration for the synchronized particle system.

    The batch size is given either explicitly (``n_killed``) or through
    ``theta`` via ``K = round((1-theta) N)``; if both are present the
    explicit value drives the engine (the oracle side of a validation still
    uses ``theta``, which is how a deliberate mismatch is expressed).
    """

    n_particles: int
    horizon: float
    seed: int
    n_killed: int | None = None
    theta: float | None = None
    model: object = None
    test_functions: tuple = ("alive",)
    branch_ceiling: int = 10_000

    def __post_init__(self):
        if not isinstance(self.n_particles, int) or self.n_particles < 2:
            raise ConfigError(f"n_particles must be an integer >= 2, got {self.n_particles}")
        if self.n_particles >= 2**32:
            raise ConfigError("n_particles must be < 2**32")
        if not self.horizon > 0:
            raise ConfigError(f"horizon T must be > 0, got {self.horizon}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.n_killed is None and self.theta is None:
            raise ConfigError("either n_killed (K) or theta must be given")
        if self.n_killed is not None:
            if not isinstance(self.n_killed, int) or not 1 <= self.n_killed <= self.n_particles - 1:
                raise ConfigError(
                    f"n_killed must satisfy 1 <= K <= N-1 = {self.n_particles - 1}, "
                    f"got K = {self.n_killed}")
        if self.theta is not None and not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must be in (0,1), got {self.theta}")
        if not 0 < self.branch_ceiling < 2**32:
            raise ConfigError("branch_ceiling must be in (0, 2**32)")

    def batch_k(self):
        """Resolved batch size K."""
        if self.n_killed is not None:
            return self.n_killed
        return batch_size_from_theta(self.theta, self.n_particles)

    @classmethod
    def from_dict(cls, spec, model=None):
        """Build from the JSON form {"N", "K" or "theta", "T", "seed", "model", ...}."""
        try:
            n = spec["N"]
            horizon = spec["T"]
        except KeyError as exc:
            raise ConfigError(f"missing required config field {exc.args[0]!r}") from None
        if "seed" not in spec:
            raise ConfigError("config must carry an explicit seed (no wall-clock default)")
        if model is None and "model" in spec:
            model = model_from_dict(spec["model"])
        kwargs = {}
        if "branch_ceiling" in spec:
            kwargs["branch_ceiling"] = int(spec["branch_ceiling"])
        return cls(
            n_particles=int(n),
            horizon=float(horizon),
            seed=int(spec["seed"]),
            n_killed=int(spec["K"]) if "K" in spec else None,
            theta=float(spec["theta"]) if "theta" in spec else None,
            model=model,
            test_functions=tuple(spec.get("test_functions", ("alive",))),
            **kwargs,
        )


class ParticleStreams:
    """Counter-based random streams keyed by (seed, epoch, particle).

    Each (epoch, particle) pair owns an independent Philox stream whose
    128-bit key is ``seed * 2**64 + epoch * 2**32 + particle``.  ``use``
    rebinds one long-lived generator to the requested key with its counter
    reset, which is orders of magnitude cheaper than constructing a new
    generator per stream while producing the identical draw sequence.
    """

    def __init__(self, seed):
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self._bitgen = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bitgen)
        self._state = self._bitgen.state
        self._key = self._state["state"]["key"]
        self._key[1] = seed
        self._counter = self._state["state"]["counter"]

    def use(self, epoch, particle):
        """Generator positioned at the start of stream (epoch, particle)."""
        self._key[0] = (epoch << 32) | particle
        self._counter[:] = 0
        self._bitgen.state = self._state
        return self._gen


@dataclass
class EnsembleState:
    """The N-particle system at one time point."""

    states: list
    dead_pending: set = field(default_factory=set)
    branch_count: int = 0
    sim_time: float = 0.0
    branch_times: list = field(default_factory=list)
    cost_segments: int = 0


@dataclass
class FVRunRecord:
    """Outputs of one synchronized Fleming-Viot run."""

    p_hat: float
    gamma_hat: dict
    eta_norm_hat: dict
    branch_times: list
    resample_count: int
    cost_segments: int
    alive_fraction_at_T: float
    n_particles: int
    n_killed: int
    seed: int

    def to_dict(self):
        """JSON-ready dictionary; an undefined normalized estimate maps to None."""
        eta = {k: (None if math.isnan(v) else v) for k, v in self.eta_norm_hat.items()}
        return {
            "p_hat": self.p_hat,
            "gamma_hat": dict(self.gamma_hat),
            "eta_norm_hat": eta,
            "branch_times": list(self.branch_times),
            "resample_count": self.resample_count,
            "cost_segments": self.cost_segments,
            "alive_fraction_at_T": self.alive_fraction_at_T,
            "n_particles": self.n_particles,
            "n_killed": self.n_killed,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        eta = {k: (math.nan if v is None else v) for k, v in d["eta_norm_hat"].items()}
        return cls(
            p_hat=d["p_hat"], gamma_hat=dict(d["gamma_hat"]), eta_norm_hat=eta,
            branch_times=list(d["branch_times"]), resample_count=d["resample_count"],
            cost_segments=d["cost_segments"], alive_fraction_at_T=d["alive_fraction_at_T"],
            n_particles=d["n_particles"], n_killed=d["n_killed"], seed=d["seed"],
        )


def rho_estimator(branch_count, n_killed, n_particles):
    """Mass estimator (1 - K/N)**B after B branchings."""
    if branch_count < 0:
        raise ValueError("branch count must be >= 0")
    if not 1 <= n_killed < n_particles:
        raise ValueError(f"need 1 <= K < N, got K={n_killed}, N={n_particles}")
    return (1.0 - n_killed / n_particles) ** branch_count


def branch_step(ensemble, survivor_states, rng):
    """Rebirth every pending-dead particle onto a uniform survivor state.

    ``survivor_states`` are the states, at the current branching time, of the
    N-K particles that are not being resampled; each dead particle receives
    an independent uniform draw from them (with replacement).  Increments the
    branching counter and clears the pending set.
    """
    n = len(ensemble.states)
    k = len(ensemble.dead_pending)
    if len(survivor_states) != n - k:
        raise ValueError(
            f"expected {n - k} survivor states for N={n}, K={k}; got {len(survivor_states)}")
    for s in survivor_states:
        if is_cemetery(s):
            raise ValueError("survivor states must all be interior")
    m = len(survivor_states)
    for d in sorted(ensemble.dead_pending):
        ensemble.states[d] = survivor_states[int(rng.integers(m))]
    ensemble.branch_count += 1
    ensemble.branch_times.append(ensemble.sim_time)
    ensemble.dead_pending = set()
    return ensemble


def _vector_estimates(states, test_functions):
    """Vectorized terminal sums for finite-state models; None if inapplicable."""
    if not all(tf.values is not None for tf in test_functions):
        return None
    idx = np.empty(len(states), dtype=np.int64)
    for i, s in enumerate(states):
        if s is CEMETERY:
            idx[i] = -1
        elif type(s) is int:
            idx[i] = s
        else:
            return None
    alive = idx >= 0
    n_alive = int(alive.sum())
    sums = {tf.name: float(tf.values[idx[alive]].sum()) for tf in test_functions}
    return n_alive, sums


def estimators_at_T(ensemble, test_functions, n_killed):
    """Terminal estimators (p_hat, gamma_hat, eta_norm_hat).

    Dead particles (pending or killed exactly at T) sit at the cemetery and
    contribute 0 to every observable and to the alive indicator.  The
    normalized ratio is NaN when no particle is alive, in which case
    ``p_hat = 0``.
    """
    states = ensemble.states
    n = len(states)
    rho = rho_estimator(ensemble.branch_count, n_killed, n)
    fast = _vector_estimates(states, test_functions)
    if fast is not None:
        n_alive, sums = fast
    else:
        n_alive = sum(0 if is_cemetery(s) else 1 for s in states)
        sums = {tf.name: sum(tf.evaluate(s) for s in states) for tf in test_functions}
    alive_fraction = n_alive / n
    p_hat = rho * alive_fraction
    gamma_hat = {name: rho * s / n for name, s in sums.items()}
    if n_alive == 0:
        eta_norm_hat = {name: math.nan for name in sums}
    else:
        eta_norm_hat = {name: s / n_alive for name, s in sums.items()}
    return p_hat, gamma_hat, eta_norm_hat


def _resolve_test_functions(config, model):
    out = []
    for tf in config.test_functions:
        if isinstance(tf, TestFunction):
            out.append(tf)
        else:
            out.append(model.test_function(tf))
    return out


class _Evolver:
    """Maps a per-particle simulation closure over particles, optionally threaded.

    Every worker owns its own ParticleStreams, so results do not depend on
    which thread handles which particle.
    """

    def __init__(self, seed, threads):
        self.seed = seed
        self.threads = threads
        self._streams = ParticleStreams(seed)
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        self._local = threading.local()

    def _worker_streams(self):
        streams = getattr(self._local, "streams", None)
        if streams is None:
            streams = self._local.streams = ParticleStreams(self.seed)
        return streams

    def map(self, fn, particles):
        if self._pool is None:
            streams = self._streams
            return [fn(streams, p) for p in particles]
        particles = list(particles)
        chunk = max(64, len(particles) // (4 * self.threads) + 1)
        blocks = [particles[i:i + chunk] for i in range(0, len(particles), chunk)]

        def run_block(block):
            streams = self._worker_streams()
            return [fn(streams, p) for p in block]

        out = []
        for block_result in self._pool.map(run_block, blocks):
            out.extend(block_result)
        return out

    def shutdown(self):
        if self._pool is not None:
            self._pool.shutdown()


def _rebirth_state(segment, tau):
    """Survivor state at the branching time; falls back to the last interior
    state when the survivor is killed exactly at tau (simultaneous-death tie,
    possible only for grid-discretized models)."""
    s = segment.state_at(tau)
    if s is CEMETERY:
        return segment.last_interior_state()
    return s


def run_fv(config, model=None, *, threads=1, check_invariants=False):
    """Run one synchronized Fleming-Viot simulation up to the horizon.

    Parameters
    ----------
    config : FVConfig
        Population size, batch size (or theta), horizon, seed, observables.
    model : optional
        Overrides ``config.model``.
    threads : int
        Worker threads for the evolve phase.  Results are bit-identical to
        the single-threaded reference mode for any thread count.
    check_invariants : bool
        Assert population conservation and post-branching interiority at
        every branching (used by the test suite).

    Returns
    -------
    FVRunRecord

    Raises
    ------
    NonTerminationError
        If the branching count exceeds ``config.branch_ceiling``.
    """
    if model is None:
        model = config.model
    if model is None:
        raise ConfigError("no model given (config.model is empty)")
    n = config.n_particles
    k = config.batch_k()
    horizon = config.horizon
    test_functions = _resolve_test_functions(config, model)

    segments = [None] * n
    heap = []
    evolver = _Evolver(config.seed, threads)
    try:
        def initial(streams, p):
            rng = streams.use(0, p)
            tiebreak = rng.random()  # drawn first so heap order is stream-determined
            seg = model.advance_with_skeleton(model.sample_initial(rng), 0.0, horizon, rng)
            return p, tiebreak, seg

        for p, tiebreak, seg in evolver.map(initial, range(n)):
            segments[p] = seg
            if seg.death_time is not None and seg.death_time < horizon:
                heapq.heappush(heap, (seg.death_time, tiebreak, p))

        cost = n
        branch_count = 0
        branch_times = []
        dead_pending = set()

        while heap:
            death_time, tiebreak, p = heapq.heappop(heap)
            dead_pending.add(p)
            if len(dead_pending) < k:
                continue

            tau = death_time
            branch_count += 1
            if branch_count > config.branch_ceiling:
                raise NonTerminationError(
                    f"exceeded {config.branch_ceiling} branchings before T={horizon}; "
                    "almost-sure finiteness of the branching count looks violated "
                    "(check the model and batch size)")
            branch_times.append(tau)

            # Uniform choice among the N-K survivors.  For small batches a
            # rejection draw over all indices avoids materializing the
            # survivor list; both routes are uniform over the same set.
            pending = dead_pending
            if k <= n // 2:
                survivor_list = None
            else:
                survivor_list = [m for m in range(n) if m not in pending]

            def rebirth(streams, d, tau=tau, epoch=branch_count,
                        pending=pending, survivor_list=survivor_list):
                rng = streams.use(epoch, d)
                tiebreak = rng.random()
                if survivor_list is None:
                    while True:
                        m = int(rng.integers(n))
                        if m not in pending:
                            break
                else:
                    m = survivor_list[int(rng.integers(len(survivor_list)))]
                state = _rebirth_state(segments[m], tau)
                seg = model.advance_with_skeleton(state, tau, horizon, rng)
                return d, tiebreak, seg

            reborn = evolver.map(rebirth, sorted(dead_pending))
            for d, tb, seg in reborn:
                segments[d] = seg
                cost += 1
                if seg.death_time is not None and seg.death_time < horizon:
                    heapq.heappush(heap, (seg.death_time, tb, d))

            if check_invariants:
                assert len(segments) == n
                assert all(not is_cemetery(seg.states[0]) for _, _, seg in reborn)
                assert len(dead_pending) == k
                rho = rho_estimator(branch_count, k, n)
                assert 0.0 < rho <= 1.0
            dead_pending = set()
    finally:
        evolver.shutdown()

    final_states = [
        CEMETERY if p in dead_pending else segments[p].state_at(horizon)
        for p in range(n)
    ]
    ensemble = EnsembleState(
        states=final_states,
        dead_pending=dead_pending,
        branch_count=branch_count,
        sim_time=horizon,
        branch_times=branch_times,
        cost_segments=cost,
    )
    p_hat, gamma_hat, eta_norm_hat = estimators_at_T(ensemble, test_functions, k)
    alive_fraction = sum(0 if is_cemetery(s) else 1 for s in final_states) / n
    return FVRunRecord(
        p_hat=p_hat,
        gamma_hat=gamma_hat,
        eta_norm_hat=eta_norm_hat,
        branch_times=branch_times,
        resample_count=branch_count,
        cost_segments=cost,
        alive_fraction_at_T=alive_fraction,
        n_particles=n,
        n_killed=k,
        seed=config.seed,
    )
