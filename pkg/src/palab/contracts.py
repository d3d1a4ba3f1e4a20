"""Contract construction and reward evaluation for the n-agent system.

A Contract is the triple (Y0, gamma, aleph) plus a truncation level l: the
fields actually written into the contract are gamma ^ l and aleph ^ l
(one-sided pointwise minimum; a symmetric clip is available behind a flag
for bounded-feedback experiments). The terminal payment is defined through
the ensemble certainty-equivalent process

    Y_{k+1} = Y_k  -  dt * mean_i H(t_k, X^i_k, mu_k, e^i_k, z^i_k)
                   +  mean_i [ z^i_k / sigma(t_k, X^i_k) * (X^i_{k+1} - X^i_k) ],

with z = gamma ^ l along the paths, and xi = g^{-1}(mu, Y_T). The same
one-step update (contract_y_step below) is reused verbatim by the n-player
value estimator so the two agree to floating-point accumulation error, not
just in distribution.

Because X^i_{k+1} - X^i_k = b_hat dt + sigma dW for an agent playing the
recommended response, the two H terms cancel pathwise and the update
reduces to -L_hat dt + z dW: the contract pays the reservation level in
expectation and the recommended response is optimal up to O(1/n) terms.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .estimates import MCEstimate, mean_se
from .measures import BatchedEmpiricalMeasure, EmpiricalMeasure, MeasureFlow
from .model import (
    ModelSpec,
    _maximize_array,
    identity_utility,
    reduced_coefficients,
    slope_over_sigma,
)
from .sde_engine import ParticlePaths, SeedSpec, SimGrid, simulate_particles

MAX_DEVIATION_CELLS = 20_000


class ContractEvaluationError(RuntimeError):
    """g_inverse (or another terminal map) failed while pricing a contract."""


@dataclass(frozen=True)
class Contract:
    """Terminal-payment contract: initial level, slope field, rate field.

    gamma and aleph are (t, x) -> value callables that broadcast over state
    arrays. truncation_l caps both fields from above (value ^ l, the
    literal one-sided minimum); use math.inf for the untruncated contract,
    or symmetric=True to clip into [-l, l] instead.
    """

    Y0: float
    gamma: Callable
    aleph: Callable
    truncation_l: float = math.inf
    symmetric: bool = False

    def __post_init__(self):
        if math.isnan(self.truncation_l):
            raise ValueError("truncation_l must be a number or +inf")

    def _truncate(self, v):
        if math.isinf(self.truncation_l):
            return v
        if self.symmetric:
            return np.clip(v, -self.truncation_l, self.truncation_l)
        return np.minimum(v, self.truncation_l)

    def gamma_l(self, t, x):
        """The truncated slope gamma(t, x) ^ l."""
        return self._truncate(self.gamma(t, x))

    def aleph_l(self, t, x):
        """The truncated rate aleph(t, x) ^ l."""
        return self._truncate(self.aleph(t, x))


def _check_floor(contract: Contract, model: ModelSpec) -> None:
    if contract.Y0 < model.reservation_R - 1e-12:
        raise ValueError(
            f"contract Y0={contract.Y0} is below the reservation level "
            f"R={model.reservation_R}"
        )


def contract_y_step(y: float, dt: float, H, zsig, dX) -> float:
    """One ensemble step of the certainty-equivalent accumulation.

    Shared between evaluate_terminal_payment and the n-player value
    estimator so both produce bit-identical Y paths on the same inputs:
    per step, take the ensemble mean of H and of z/sigma * dX, then
    accumulate.
    """
    return y - dt * float(np.mean(H)) + float(np.mean(zsig * dX))


def _grid_dt(times: np.ndarray) -> float:
    # Matches SimGrid.dt exactly for grids built by SimGrid.nodes.
    return (float(times[-1]) - float(times[0])) / (len(times) - 1)


def _g_inverse(model: ModelSpec, flow, y):
    try:
        out = model.g_inverse(flow, y)
    except Exception as exc:  # noqa: BLE001 - user-supplied map
        raise ContractEvaluationError(f"g_inverse failed at y={y!r}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise ContractEvaluationError(f"g_inverse returned non-finite payment at y={y!r}")
    return out


def evaluate_terminal_payment(
    contract: Contract,
    model: ModelSpec,
    paths: ParticlePaths,
    flow: MeasureFlow,
) -> tuple[float, np.ndarray]:
    """Terminal payment xi and the ensemble Y path along simulated paths.

    Returns (xi, y_path) with y_path of length steps+1, y_path[0] = Y0 and
    xi = g^{-1}(flow, y_path[-1]). The paths are expected to come from
    simulate_particles under this contract's truncated fields.
    """
    _check_floor(contract, model)
    times = paths.times
    dt = _grid_dt(times)
    n_steps = paths.n_steps
    y_path = np.empty(n_steps + 1)
    y = float(contract.Y0)
    y_path[0] = y
    for k in range(n_steps):
        t = float(times[k])
        x = paths.states[:, k]
        m = flow.at(k)
        e = contract.aleph_l(t, x)
        z = contract.gamma_l(t, x)
        sig = model.vol_sigma(t, x)
        _, _, H = reduced_coefficients(model, t, x, m, e, z)
        dX = paths.states[:, k + 1] - paths.states[:, k]
        y = contract_y_step(y, dt, H, slope_over_sigma(z, sig), dX)
        y_path[k + 1] = y
    xi = float(_g_inverse(model, flow, y))
    return xi, y_path


def mkv_contract_payment(
    contract: Contract,
    model: ModelSpec,
    paths: ParticlePaths,
    flow: MeasureFlow,
    return_levels: bool = False,
):
    """Limit-regime payment: per-path levels, averaged, then inverted.

    Each path carries its own accumulation

        s^i = Y0 - sum_k H^i_k dt + sum_k (z/sigma)^i_k dX^i_k,

    and the payment is g^{-1}(flow, mean_i s^i) — the level average is
    taken before inverting g, matching the limit construction. Returns the
    scalar payment, or (payment, levels) with return_levels=True.
    """
    _check_floor(contract, model)
    times = paths.times
    dt = _grid_dt(times)
    levels = np.full(paths.n_particles, float(contract.Y0))
    for k in range(paths.n_steps):
        t = float(times[k])
        x = paths.states[:, k]
        m = flow.at(k)
        e = contract.aleph_l(t, x)
        z = contract.gamma_l(t, x)
        sig = model.vol_sigma(t, x)
        _, _, H = reduced_coefficients(model, t, x, m, e, z)
        dX = paths.states[:, k + 1] - paths.states[:, k]
        levels = levels - H * dt + slope_over_sigma(z, sig) * dX
    payment = float(_g_inverse(model, flow, float(np.mean(levels))))
    if return_levels:
        return payment, levels
    return payment


def recommended_controls(
    contract: Contract,
    model: ModelSpec,
    paths: ParticlePaths,
    flow: MeasureFlow,
) -> np.ndarray:
    """The Hamiltonian-optimal actions along the paths, shape (n, steps)."""
    times = paths.times
    n = paths.n_particles
    out = np.empty((n, paths.n_steps))
    for k in range(paths.n_steps):
        t = float(times[k])
        x = paths.states[:, k]
        m = flow.at(k)
        e = contract.aleph_l(t, x)
        zsig = slope_over_sigma(contract.gamma_l(t, x), model.vol_sigma(t, x))
        if model.analytic_maximizer is not None:
            a = model.analytic_maximizer(t, x, m, e, zsig)
        else:
            a = _maximize_array(model, t, x, m, e, zsig)
        out[:, k] = np.broadcast_to(a, (n,))
    return out


def payment_matrix(contract: Contract, paths: ParticlePaths) -> np.ndarray:
    """The truncated rate field along the paths, shape (n, steps)."""
    n = paths.n_particles
    out = np.empty((n, paths.n_steps))
    for k in range(paths.n_steps):
        e = contract.aleph_l(float(paths.times[k]), paths.states[:, k])
        out[:, k] = np.broadcast_to(e, (n,))
    return out


def agent_reward(
    model: ModelSpec,
    paths: ParticlePaths,
    flow: MeasureFlow,
    actions: np.ndarray,
    payments: np.ndarray,
    xi: float,
) -> MCEstimate:
    """Average agent reward mean_i [ integral L dt + g(flow, xi) ].

    The SE is the within-ensemble spread of the per-agent running terms; it
    is a diagnostic for one simulated ensemble, not a sampling error for
    the expectation (use replications for that).
    """
    times = paths.times
    dt = _grid_dt(times)
    acc = np.zeros(paths.n_particles)
    for k in range(paths.n_steps):
        t = float(times[k])
        x = paths.states[:, k]
        m = flow.at(k)
        L = model.running_cost_L(t, x, m, payments[:, k], actions[:, k])
        acc = acc + L * dt
    rewards = acc + float(model.terminal_utility_g(flow, xi))
    return mean_se(rewards)


def principal_reward(
    model: ModelSpec,
    paths: ParticlePaths,
    flow: MeasureFlow,
    payments: np.ndarray,
    xi: float,
    u_inside: bool = True,
) -> MCEstimate:
    """Principal's realized reward on one simulated ensemble.

    The pre-utility value is v = mean_i Upsilon(X^i_T) - g_P(flow, xi)
    - mean_i integral L_P dt. One ensemble is one replication of the
    n-agent system, so u_inside=True returns U(v) — averaging these across
    replications puts the utility inside the expectation — while
    u_inside=False returns v itself, for callers that average first and
    apply U to the aggregate. SEs are within-ensemble diagnostics (delta
    method through U when inside).
    """
    times = paths.times
    dt = _grid_dt(times)
    lp = np.zeros(paths.n_particles)
    for k in range(paths.n_steps):
        t = float(times[k])
        lp = lp + model.principal_running_cost_LP(t, payments[:, k]) * dt
    v_i = model.production_utility_Upsilon(paths.states[:, -1]) - lp
    inner = mean_se(v_i)
    v = inner.value - float(model.principal_terminal_cost_gP(flow, xi))
    if not u_inside:
        return MCEstimate(value=v, se=inner.se, n_samples=paths.n_particles)
    U = model.principal_utility_U
    h = 1e-6 * max(1.0, abs(v))
    slope = (float(U(v + h)) - float(U(v - h))) / (2.0 * h)
    return MCEstimate(
        value=float(U(v)), se=abs(slope) * inner.se, n_samples=paths.n_particles
    )


def contract_report(
    contract: Contract,
    model: ModelSpec,
    n: int,
    grid: SimGrid,
    replications: int,
    seed: SeedSpec,
) -> dict:
    """Simulate the contracted system and report across-replication stats.

    Each replication simulates n agents playing the recommended response to
    the truncated contract fields, evaluates the terminal payment, and
    records the payment, the average agent reward, and the principal's
    pre-utility value v. The report gives across-replication estimates of
    E[xi] and the agent reward, plus the principal's value under both
    utility conventions: "principal_inside" averages U(v) over replications
    and "principal_outside" applies U to the averaged v (delta-method SE).
    """
    _check_floor(contract, model)
    if replications < 1:
        raise ValueError("replications must be >= 1")
    xi_vals = np.empty(replications)
    agent_vals = np.empty(replications)
    v_vals = np.empty(replications)
    u_vals = np.empty(replications)
    for r in range(replications):
        paths, flow = simulate_particles(
            model, contract.gamma_l, contract.aleph_l, n, grid, seed.child(r)
        )
        xi, _ = evaluate_terminal_payment(contract, model, paths, flow)
        actions = recommended_controls(contract, model, paths, flow)
        payments = payment_matrix(contract, paths)
        xi_vals[r] = xi
        agent_vals[r] = agent_reward(model, paths, flow, actions, payments, xi).value
        v_vals[r] = principal_reward(
            model, paths, flow, payments, xi, u_inside=False
        ).value
        u_vals[r] = float(model.principal_utility_U(v_vals[r]))

    v_est = mean_se(v_vals)
    U = model.principal_utility_U
    h = 1e-6 * max(1.0, abs(v_est.value))
    slope = (float(U(v_est.value + h)) - float(U(v_est.value - h))) / (2.0 * h)
    outside = MCEstimate(
        value=float(U(v_est.value)), se=abs(slope) * v_est.se, n_samples=replications
    )
    return {
        "xi": mean_se(xi_vals),
        "agent_reward": mean_se(agent_vals),
        "principal_inside": mean_se(u_vals),
        "principal_outside": outside,
        "per_replication": {
            "xi": xi_vals.tolist(),
            "agent_reward": agent_vals.tolist(),
            "principal_value": v_vals.tolist(),
        },
    }


def joint_deviation_scan(
    contract: Contract,
    model: ModelSpec,
    action_grid,
    n: int,
    grid: SimGrid,
    replications: int,
    seed: SeedSpec,
) -> dict:
    """Paired reward change under constant joint deviations of all n agents.

    Every cell assigns each agent a constant action from action_grid (the
    full cartesian product, so len(action_grid)**n cells — keep n tiny); a
    baseline system where everyone plays the recommended response runs on
    the same Brownian draws. The reported gain per cell is the across-
    replication mean of (average agent reward under the deviation) minus
    (average agent reward under the recommendation), a paired difference
    with far smaller SE than either term alone. Cooperative optimality of
    the recommendation means no gain should exceed noise.

    Returns {"actions": (B, n), "gain": (B,), "se": (B,), "baseline":
    MCEstimate of the recommended-play reward}. Requires terminal maps that
    ignore the flow argument or accept batched measures.
    """
    _check_floor(contract, model)
    action_grid = np.asarray(action_grid, dtype=float)
    cells = np.array(list(itertools.product(action_grid, repeat=n)))
    B = cells.shape[0]
    if B > MAX_DEVIATION_CELLS:
        raise ValueError(
            f"{B} deviation cells exceed the {MAX_DEVIATION_CELLS} cap; "
            "use a coarser action grid or fewer agents"
        )
    rows = B + 1  # last row: everyone plays the recommendation
    times = grid.nodes
    dt = grid.dt
    sqdt = math.sqrt(dt)

    rewards = np.empty((replications, rows))
    for r in range(replications):
        rng = seed.generator(r)
        x0 = np.asarray(model.initial_law_nu(n, rng), dtype=float)
        x = np.tile(x0, (rows, 1))
        y = np.full(rows, float(contract.Y0))
        run_acc = np.zeros((rows, n))
        for k in range(grid.steps):
            t = float(times[k])
            m = BatchedEmpiricalMeasure(x)
            e = contract.aleph_l(t, x)
            z = contract.gamma_l(t, x)
            sig = model.vol_sigma(t, x)
            zsig = slope_over_sigma(z, sig)
            if model.analytic_maximizer is not None:
                a_rec = model.analytic_maximizer(t, x, m, e, zsig)
            else:
                a_rec = _maximize_array(model, t, x, m, e, zsig)
            a_play = np.array(np.broadcast_to(a_rec, x.shape))
            a_play[:B, :] = cells
            b = model.drift_b(t, x, m, e, a_play)
            run_acc = run_acc + np.broadcast_to(
                model.running_cost_L(t, x, m, e, a_play), x.shape
            ) * dt
            _, _, H = reduced_coefficients(model, t, x, m, e, z)
            dW = sqdt * rng.standard_normal(n)
            x_next = x + b * dt + sig * dW[None, :]
            if not np.all(np.isfinite(x_next)):
                raise ContractEvaluationError(f"deviation scan blew up at step {k}")
            dX = x_next - x
            y = (
                y
                - dt * np.mean(np.broadcast_to(H, x.shape), axis=1)
                + np.mean(np.broadcast_to(zsig * dX, x.shape), axis=1)
            )
            x = x_next
        flow1 = MeasureFlow.single(grid.horizon_T, BatchedEmpiricalMeasure(x))
        xi = np.asarray(_g_inverse(model, flow1, y), dtype=float)
        g_term = np.asarray(model.terminal_utility_g(flow1, xi), dtype=float)
        rewards[r] = np.mean(run_acc, axis=1) + g_term

    gains = rewards[:, :B] - rewards[:, B:]
    gain_mean = gains.mean(axis=0)
    if replications > 1:
        gain_se = gains.std(axis=0, ddof=1) / math.sqrt(replications)
    else:
        gain_se = np.zeros(B)
    return {
        "actions": cells,
        "gain": gain_mean,
        "se": gain_se,
        "baseline": mean_se(rewards[:, B]),
    }


def multitask_principal_formula(
    params,
    R: float,
    T: float,
    E_iota: float,
    n: int,
    U: Callable = identity_utility,
    noise_factor: float = 2.0,
    iota_var: float = 0.0,
    quad_nodes: int = 95,
) -> float:
    """The stated large-n expansion of the principal's inside-utility value.

    Evaluates E[ U( -R + e^{kT} mean(iota) + (1/2)int gamma_hat^2
    + (noise_factor/n) sum_i int gamma_hat dW^i ) ] by Gauss-Hermite
    quadrature, treating the argument as Gaussian with mean V_inf and
    variance e^{2kT} iota_var / n + noise_factor^2 int gamma_hat^2 / n.
    The default noise_factor of 2 reproduces the expansion as stated;
    direct simulation of the finite-n system shows the production and
    contract noise terms cancel instead of adding (see tests), so treat
    nonzero factors as an upper model of the fluctuation — exact only for
    linear U, where the noise terms average out either way.
    """
    from scipy.special import roots_hermitenorm

    from .mkv_control import analytic_multitask

    am = analytic_multitask(params, R=R, T=T, E_iota=E_iota)
    var = (
        noise_factor**2 * am.gamma_sq_integral / n
        + math.exp(2.0 * params.kappa_bar * T) * iota_var / n
    )
    s = math.sqrt(var)
    if s == 0.0:
        return float(U(am.V_infinity))
    nodes, weights = roots_hermitenorm(int(quad_nodes))
    vals = np.asarray(U(am.V_infinity + s * nodes), dtype=float)
    return float(np.sum(weights * vals) / math.sqrt(2.0 * math.pi))
