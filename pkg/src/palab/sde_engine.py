"""Euler-Maruyama simulation of the interacting particle system.

The n agents follow

    dX^i_t = b(t, X^i_t, mu^n_t, e^i_t, a^i_t) dt + sigma(t, X^i_t) dW^i_t,

where mu^n_t is the empirical measure of the current ensemble, e^i_t is a
payment-rate field evaluated along the path, and a^i_t is either the
Hamiltonian-optimal response to a slope field gamma (the default) or an
explicitly supplied action field. The scheme is explicit Euler with the
measure updated simultaneously with the states: the coefficients at step k
see the measure of the step-k states.

Randomness is organized around SeedSpec: one counter-based generator per
(master_seed, spawn key) pair, so any worker can reproduce any stream
without coordinating with the others. Within a stream the consumption order
is fixed — n initial draws, then one length-n increment vector per step —
which makes every simulation bit-reproducible regardless of how the
surrounding experiment is parallelized. Particle i always reads lane i of
the step draws.

All Ito sums in this package use the left endpoint of each interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .measures import EmpiricalMeasure, MeasureFlow
from .model import ModelSpec, NumericDomainError, reduced_coefficients

DEFAULT_N_PROXY = 100_000
BLOWUP_THRESHOLD = 1e8


class SimulationBlowupError(RuntimeError):
    """A state exceeded the blow-up threshold (or went non-finite).

    Attributes step and t locate the first offending Euler step.
    """

    def __init__(self, step: int, t: float, worst: float):
        self.step = step
        self.t = t
        self.worst = worst
        super().__init__(
            f"simulation blew up at step {step} (t={t:.6g}): max |X| = {worst:.3e}"
        )


@dataclass(frozen=True)
class SimGrid:
    """Uniform time grid on [0, horizon_T] with `steps` Euler steps."""

    horizon_T: float
    steps: int

    def __post_init__(self):
        if not (self.horizon_T > 0):
            raise ValueError(f"horizon_T must be positive, got {self.horizon_T}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon_T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        """The steps+1 grid times, with both endpoints exact."""
        return np.linspace(0.0, self.horizon_T, self.steps + 1)


@dataclass(frozen=True)
class SeedSpec:
    """Hierarchical seed: a master seed plus a tuple spawn-key prefix.

    generator(*key) builds a Philox generator keyed by prefix + key, so
    streams are independent across distinct keys and reproducible from the
    (master_seed, key) pair alone. child(*key) extends the prefix, letting a
    component hand scoped sub-seeds to its own replications.
    """

    master_seed: int
    prefix: tuple = ()

    def child(self, *key: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, self.prefix + tuple(int(k) for k in key))

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            self.master_seed, spawn_key=self.prefix + tuple(int(k) for k in key)
        )
        return np.random.Generator(np.random.Philox(ss))


SeedLike = Union[SeedSpec, np.random.Generator]


def _as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, SeedSpec):
        return seed.generator()
    if isinstance(seed, np.random.Generator):
        return seed
    raise TypeError(f"seed must be a SeedSpec or numpy Generator, got {type(seed)!r}")


@dataclass
class ParticlePaths:
    """Materialized ensemble paths on a uniform grid.

    states has shape (n, steps+1) with states[:, 0] the initial draws;
    increments are the Brownian increments, shape (n, steps).
    """

    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        if self.states.shape != (self.increments.shape[0], len(self.times)):
            raise ValueError("states must be (n, len(times))")
        if self.increments.shape[1] != len(self.times) - 1:
            raise ValueError("increments must be (n, len(times)-1)")

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    def terminal_measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[:, -1])


def _check_sigma(sig, t):
    # The theory requires sigma > 0; the engine tolerates sigma == 0 so
    # that deterministic ODE-limit diagnostics (sigma scaled to zero) run.
    if not np.all(np.isfinite(sig)) or not np.all(np.greater_equal(sig, 0.0)):
        raise NumericDomainError(f"volatility must be finite and >= 0 (t={t}): {sig!r}")


def _check_state(x_next, k, t, threshold):
    finite = np.isfinite(x_next)
    if not np.all(finite):
        raise SimulationBlowupError(k + 1, t, math.inf)
    worst = float(np.max(np.abs(x_next)))
    if worst > threshold:
        raise SimulationBlowupError(k + 1, t, worst)


def simulate_particles(
    model: ModelSpec,
    gamma: Callable,
    aleph: Callable,
    n: int,
    grid: SimGrid,
    seed: SeedLike,
    actions: Optional[Callable] = None,
    blowup_threshold: float = BLOWUP_THRESHOLD,
) -> tuple[ParticlePaths, MeasureFlow]:
    """Simulate the n-agent system under feedback fields gamma and aleph.

    gamma(t, x) is the payment slope and aleph(t, x) the payment-rate field;
    both must broadcast over the length-n state vector. By default each
    agent plays the Hamiltonian-optimal response to slope gamma/sigma; pass
    `actions` (a (t, x) -> action field) to override the played actions
    while keeping the same contract fields.

    Returns the materialized paths together with the flow of empirical
    measures at every grid node. Raises SimulationBlowupError if a state
    leaves [-blowup_threshold, blowup_threshold] or goes non-finite.
    """
    if n < 1:
        raise ValueError(f"need at least one particle, got n={n}")
    rng = _as_generator(seed)
    times = grid.nodes
    dt = grid.dt
    sqdt = math.sqrt(dt)

    x = np.asarray(model.initial_law_nu(n, rng), dtype=float)
    if x.shape != (n,):
        raise ValueError(f"initial law returned shape {x.shape}, expected ({n},)")
    states = np.empty((n, grid.steps + 1))
    incs = np.empty((n, grid.steps))
    states[:, 0] = x
    x = states[:, 0].copy()

    for k in range(grid.steps):
        t = float(times[k])
        m = EmpiricalMeasure(states[:, k])
        e = aleph(t, x)
        z = gamma(t, x)
        sig = model.vol_sigma(t, x)
        _check_sigma(sig, t)
        if actions is None:
            b, _, _ = reduced_coefficients(model, t, x, m, e, z)
        else:
            b = model.drift_b(t, x, m, e, actions(t, x))
        dW = sqdt * rng.standard_normal(n)
        x_next = x + b * dt + sig * dW
        _check_state(x_next, k, float(times[k + 1]), blowup_threshold)
        states[:, k + 1] = x_next
        incs[:, k] = dW
        x = x_next

    paths = ParticlePaths(times=times, states=states, increments=incs)
    flow = MeasureFlow(
        times, [EmpiricalMeasure(states[:, k]) for k in range(grid.steps + 1)]
    )
    return paths, flow


def simulate_mkv_proxy(
    model: ModelSpec,
    gamma: Callable,
    aleph: Callable,
    N_proxy: int = DEFAULT_N_PROXY,
    grid: Optional[SimGrid] = None,
    seed: SeedLike = None,
    blowup_threshold: float = BLOWUP_THRESHOLD,
) -> tuple[ParticlePaths, MeasureFlow]:
    """Large-ensemble stand-in for the mean-field limit law.

    Identical to simulate_particles with N_proxy particles; the returned
    flow is treated downstream as the deterministic limit flow. Note the
    memory cost is N_proxy x (steps+1) states — the streaming evaluators in
    mkv_control avoid this when only terminal functionals are needed.
    """
    if grid is None:
        raise ValueError("grid is required")
    if seed is None:
        raise ValueError("seed is required")
    return simulate_particles(
        model, gamma, aleph, N_proxy, grid, seed, blowup_threshold=blowup_threshold
    )


def simulate_terminal_measure(
    model: ModelSpec,
    gamma: Callable,
    aleph: Callable,
    n: int,
    grid: SimGrid,
    seed: SeedLike,
    blowup_threshold: float = BLOWUP_THRESHOLD,
) -> EmpiricalMeasure:
    """Terminal empirical measure only, with O(n) memory.

    Runs exactly the simulate_particles scheme (same draw order, same state
    recursion) but stores no intermediate states; use for large ensembles
    where only the terminal law matters (e.g. chaos sweeps).
    """
    rng = _as_generator(seed)
    times = grid.nodes
    dt = grid.dt
    sqdt = math.sqrt(dt)

    x = np.asarray(model.initial_law_nu(n, rng), dtype=float)
    for k in range(grid.steps):
        t = float(times[k])
        m = EmpiricalMeasure(x)
        e = aleph(t, x)
        z = gamma(t, x)
        sig = model.vol_sigma(t, x)
        _check_sigma(sig, t)
        b, _, _ = reduced_coefficients(model, t, x, m, e, z)
        dW = sqdt * rng.standard_normal(n)
        x_next = x + b * dt + sig * dW
        _check_state(x_next, k, float(times[k + 1]), blowup_threshold)
        x = x_next
    return EmpiricalMeasure(x)


def save_paths_csv(paths: ParticlePaths, path: str) -> None:
    """Dump paths as text CSV with columns (t, particle, state).

    One row per (grid node, particle); intended for small diagnostic runs —
    large ensembles should stay in memory.
    """
    with open(path, "w") as fh:
        fh.write("t,particle,state\n")
        for k, t in enumerate(paths.times):
            col = paths.states[:, k]
            for i in range(paths.n_particles):
                fh.write(f"{float(t)!r},{i},{float(col[i])!r}\n")


def ito_integral(
    paths: ParticlePaths,
    integrand: Callable,
    against: str = "dX",
    per: str = "particle",
):
    """Left-endpoint Ito sum of integrand(t_k, X_k) against dX, dW or dt.

    per="particle" returns the length-n vector of per-particle sums;
    per="ensemble-average" returns their mean as a float.
    """
    times = paths.times
    dt = np.diff(times)
    n_steps = paths.n_steps
    vals = np.empty((paths.n_particles, n_steps))
    for k in range(n_steps):
        vals[:, k] = integrand(float(times[k]), paths.states[:, k])

    if against == "dX":
        d = np.diff(paths.states, axis=1)
    elif against == "dW":
        d = paths.increments
    elif against == "dt":
        d = np.broadcast_to(dt, (paths.n_particles, n_steps))
    else:
        raise ValueError(f"against must be 'dX', 'dW' or 'dt', got {against!r}")

    per_particle = np.sum(vals * d, axis=1)
    if per == "particle":
        return per_particle
    if per == "ensemble-average":
        return float(np.mean(per_particle))
    raise ValueError(f"per must be 'particle' or 'ensemble-average', got {per!r}")
