"""Acceptance battery: closed-form targets, convergence rates, determinism.

Each test prints one ``acceptance[...]: PASS/FAIL`` line (visible with -s or
in failure output) so a full run reads as a checklist.  Tolerances are fixed
here, not tuned: statistical checks use 3 standard errors, rate checks carry
the stated slope windows, and exact identities use machine-level bounds.
"""

import json
import math
import time

import numpy as np
import pytest

import palab.cli as cli
from conftest import HALF_GAMMA_SQ_FROZEN, simpson_gamma_sq_integral
from palab import (
    Contract,
    MultitaskParams,
    PolicyParam,
    SeedSpec,
    SimGrid,
    analytic_multitask,
    contract_report,
    evaluate_limit_objective,
    exp_saturating_utility,
    fit_rate,
    gap_sweep,
    hamiltonian_h,
    joint_deviation_scan,
    maximize_hamiltonian,
    multitask_model,
    normal_law,
    optimize_policy,
    quadratic_generic_model,
    reduced_coefficients,
    simulate_terminal_measure,
    slope_over_sigma,
    variance_se,
    wasserstein_p,
)
from palab.measures import EmpiricalMeasure


def _zero(t, x):
    return 0.0


def _report(name, ok):
    print(f"acceptance[{name}]: {'PASS' if ok else 'FAIL'}")


# ---------------------------------------------------------------------------
# 1. limit objective vs quadrature oracle
# ---------------------------------------------------------------------------

CRIT1_KAPPAS = [-0.5, 0.0, 0.5]


@pytest.mark.parametrize("kappa_bar", CRIT1_KAPPAS)
def test_limit_objective_matches_quadrature_oracle(kappa_bar):
    # identity utility, point-mass start at 0, R = 0, unit horizon, clamp 10
    start = time.monotonic()
    params = MultitaskParams(kappa_bar, b_bar=10.0)
    model = multitask_model(params)
    am = analytic_multitask(params)
    est = evaluate_limit_objective(
        model,
        (am.gamma_hat, _zero),
        N_proxy=100_000,
        grid=SimGrid(1.0, 1000),
        seed=SeedSpec(404).child(CRIT1_KAPPAS.index(kappa_bar)),
    )
    elapsed = time.monotonic() - start

    target = HALF_GAMMA_SQ_FROZEN[kappa_bar]  # = -R + half squared-slope mass
    assert abs(0.5 * simpson_gamma_sq_integral(kappa_bar) - target) < 1e-10
    if kappa_bar == 0.0:
        assert target == 0.5

    tol = max(3.0 * est.se, 5e-3)
    ok = abs(est.value - target) <= tol
    _report(f"limit objective, kappa_bar={kappa_bar}", ok)
    assert ok, (est.value, target, tol)
    assert elapsed <= 120.0, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. terminal payment mean identity and 1/n variance decay
# ---------------------------------------------------------------------------


def test_terminal_payment_mean_and_variance_rate():
    params = MultitaskParams(0.5, b_bar=10.0)
    R = 0.3
    model = multitask_model(params, R=R, nu=normal_law(0.0, 1.0))
    am = analytic_multitask(params, R=R)
    contract = Contract(Y0=R, gamma=am.gamma_hat, aleph=_zero)
    grid = SimGrid(1.0, 400)
    target = R + 0.5 * simpson_gamma_sq_integral(0.5)
    seed = SeedSpec(505)

    n_values = [10, 100, 1000]
    variances = []
    for i, n in enumerate(n_values):
        report = contract_report(contract, model, n, grid, 100, seed.child(i))
        est = report["xi"]
        assert abs(est.value - target) <= 3.0 * est.se, (n, est.value, target, est.se)
        variances.append(float(np.var(report["per_replication"]["xi"], ddof=1)))

    slope = float(np.polyfit(np.log(n_values), np.log(variances), 1)[0])
    ok = -1.2 <= slope <= -0.8
    _report(f"payment mean identity + variance slope {slope:.3f}", ok)
    assert ok, (variances, slope)


# ---------------------------------------------------------------------------
# 3. n-player gap: sign, monotonicity, square-root bound
# ---------------------------------------------------------------------------


def test_gap_positive_nonincreasing_with_sqrt_bound():
    start = time.monotonic()
    n_values = [10, 30, 100, 300, 1000]
    rows = gap_sweep(
        0.5,
        n_values,
        [10.0],
        SimGrid(1.0, 100),
        2000,
        SeedSpec(7),
        nu=normal_law(0.0, 1.0),
        U=exp_saturating_utility,
    )
    elapsed = time.monotonic() - start
    gaps = [r["gap"] for r in rows]
    ses = [r["se"] for r in rows]

    for g, s in zip(gaps, ses):
        assert g >= -3.0 * s, (gaps, ses)  # positive or noise
    for i in range(len(gaps) - 1):
        slack = 3.0 * math.hypot(ses[i], ses[i + 1])
        assert gaps[i + 1] <= gaps[i] + slack, (gaps, ses)

    C = max(gaps[0], 0.0) * math.sqrt(n_values[0])
    ok = all(
        g <= C * n**-0.5 + 3.0 * s for n, g, s in zip(n_values, gaps, ses)
    )
    _report("gap decay within calibrated sqrt(n) bound", ok)
    assert ok, [(n, g, C * n**-0.5) for n, g in zip(n_values, gaps)]
    assert elapsed <= 600.0, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 4. clamp-level differences: 1/b decay with constant calibrated at b = 0.5
# ---------------------------------------------------------------------------


def test_clamp_difference_monotone_and_inverse_b_bound():
    b_bars = [0.5, 1.0, 2.0, 4.0, 8.0]
    reference = 64.0
    rows = gap_sweep(
        0.5,
        [100],
        b_bars + [reference],
        SimGrid(1.0, 100),
        2000,
        SeedSpec(11),
        nu=normal_law(0.0, 1.0),
        U=exp_saturating_utility,
        keep_values=True,
    )
    values = {r["b_bar"]: np.asarray(r["values"]) for r in rows}
    ref = values[reference]
    m = len(ref)

    diffs, ses = [], []
    for b in b_bars:
        d = values[b] - ref  # paired: replication r shares draws across clamps
        diffs.append(abs(float(np.mean(d))))
        ses.append(float(np.std(d, ddof=1)) / math.sqrt(m))

    for i in range(len(b_bars) - 1):
        slack = 3.0 * math.hypot(ses[i], ses[i + 1])
        assert diffs[i + 1] <= diffs[i] + slack, (b_bars, diffs, ses)

    C = b_bars[0] * diffs[0]
    table = "\n".join(
        f"  b_bar={b:<4} |J_b - J_ref|={d:.6f} se={s:.2g} C/b={C / b:.6f}"
        for b, d, s in zip(b_bars, diffs, ses)
    )
    ok = all(d <= C / b + 3.0 * s for b, d, s in zip(b_bars, diffs, ses))
    _report("clamp difference within calibrated 1/b bound", ok)
    # Known to fail at b_bar = 1: with a unit-width state distribution the
    # map b -> b * |J_b - J_ref| peaks near b = 1, so a constant read off at
    # b = 0.5 undershoots there.  See notes on the truncation-rate check.
    assert ok, "\n" + table


# ---------------------------------------------------------------------------
# 5. no constant joint deviation beats the recommended controls
# ---------------------------------------------------------------------------


def test_joint_deviations_never_beat_recommended_controls():
    params = MultitaskParams(0.5, b_bar=10.0)
    R = 0.3
    model = multitask_model(params, R=R)
    am = analytic_multitask(params, R=R)
    contract = Contract(Y0=R, gamma=am.gamma_hat, aleph=_zero)
    action_grid = np.linspace(-3.0, 3.0, 25)  # step 0.25

    scan = joint_deviation_scan(
        contract, model, action_grid, 2, SimGrid(1.0, 50), 400, SeedSpec(606)
    )
    no_gain = bool(np.all(scan["gain"] <= 3.0 * scan["se"] + 1e-12))
    base = scan["baseline"]
    breaks_even = abs(base.value - R) <= 3.0 * base.se

    _report("no joint deviation beats recommended controls", no_gain and breaks_even)
    worst = int(np.argmax(scan["gain"]))
    assert no_gain, (scan["gain"][worst], scan["se"][worst], scan["actions"][worst])
    assert breaks_even, (base.value, R, base.se)


# ---------------------------------------------------------------------------
# 6. Hamiltonian envelope on random tuples
# ---------------------------------------------------------------------------


def test_hamiltonian_envelope_zero_violations():
    rng = np.random.default_rng(808)
    models = [
        multitask_model(MultitaskParams(0.7, b_bar=5.0)),
        quadratic_generic_model(a_base=0.4, sigma0=1.3),
    ]
    probes = np.linspace(-8.0, 8.0, 1000)
    for model in models:
        for _ in range(500):  # 2 models x 500 = 10^3 tuples
            t = float(rng.uniform(0, 1))
            x = float(rng.uniform(-2, 2))
            flow = EmpiricalMeasure(rng.standard_normal(8))
            z = float(rng.uniform(-4, 4))
            _, _, big_h = reduced_coefficients(model, t, x, flow, 0.0, z)
            h_vals = hamiltonian_h(model, t, x, flow, 0.0, z, probes)
            assert np.all(h_vals <= big_h + 1e-10), (t, x, z)
            zsig = slope_over_sigma(z, model.vol_sigma(t, x))
            a_hat = maximize_hamiltonian(model, t, x, flow, 0.0, zsig)
            h_at_max = hamiltonian_h(model, t, x, flow, 0.0, z, a_hat)
            assert abs(big_h - h_at_max) <= 1e-8, (t, x, z, a_hat)
    _report("Hamiltonian envelope, zero violations", True)


# ---------------------------------------------------------------------------
# 7. terminal-measure convergence rate in Wasserstein-1
# ---------------------------------------------------------------------------


def test_wasserstein_convergence_rate():
    params = MultitaskParams(0.5, b_bar=10.0)
    model = multitask_model(params, nu=normal_law(0.0, 1.0))
    am = analytic_multitask(params)
    grid = SimGrid(1.0, 20)
    master = SeedSpec(90210)
    n_values = [100, 1000, 10_000]

    w = np.empty((20, len(n_values)))
    for r in range(20):
        proxy = simulate_terminal_measure(
            model, am.gamma_hat, _zero, 100_000, grid, master.child(1, 0, r)
        )
        for i, n in enumerate(n_values):
            ensemble = simulate_terminal_measure(
                model, am.gamma_hat, _zero, n, grid, master.child(0, i, r)
            )
            w[r, i] = wasserstein_p(ensemble, proxy, p=1.0)

    medians = np.median(w, axis=0)
    fit = fit_rate(n_values, medians)
    ok = -0.65 <= fit.slope <= -0.35
    _report(f"W1 ensemble-size slope {fit.slope:.3f}", ok)
    assert ok, (list(medians), fit)


# ---------------------------------------------------------------------------
# 8. policy search recovers the closed-form optimum
# ---------------------------------------------------------------------------


def test_policy_search_recovers_closed_form():
    params = MultitaskParams(0.5)
    model = multitask_model(params)
    am = analytic_multitask(params)
    knots = np.linspace(0.0, 1.0, 9)
    m = len(knots) - 1
    initial = PolicyParam(
        knots=knots,
        gamma_c0=np.full(m, 0.5),
        gamma_c1=np.zeros(m),
        aleph_c0=np.zeros(m),
        aleph_c1=np.zeros(m),
    )
    result = optimize_policy(
        model,
        initial,
        N_proxy=10_000,
        grid=SimGrid(1.0, 50),
        seed=SeedSpec(77).child(0),
        budget=3000,
        parts=("gamma",),  # knot values and state coefficients both free
    )
    assert result.value >= result.initial_value

    mids = 0.5 * (knots[:-1] + knots[1:])
    targets = np.array([am.gamma_hat(t) for t in mids])
    knot_err = float(np.max(np.abs(result.policy.gamma_c0 - targets)))
    state_mag = float(np.max(np.abs(result.policy.gamma_c1)))

    # unbiased value of the recovered policy, finer grid and fresh draws
    final = evaluate_limit_objective(
        model, result.policy, N_proxy=100_000, grid=SimGrid(1.0, 200),
        seed=SeedSpec(991).child(0),
    )
    value_err = abs(final.value - am.V_infinity)

    ok = knot_err <= 0.05 and state_mag <= 0.05 and value_err <= 0.02
    _report(
        f"policy recovery: knot err {knot_err:.3f}, state coeff {state_mag:.3f}, "
        f"value err {value_err:.4f}",
        ok,
    )
    assert knot_err <= 0.05, (result.policy.gamma_c0, targets)
    assert state_mag <= 0.05, result.policy.gamma_c1
    assert value_err <= 0.02, (final.value, am.V_infinity)


# ---------------------------------------------------------------------------
# 9. self-check byte-identical across worker counts
# ---------------------------------------------------------------------------


def test_self_check_byte_identical_across_workers(tmp_path):
    cfg = {
        "experiment": "determinism",
        "model": {"name": "multitask", "params": {"kappa_bar": 0.5}},
        "grid": {"steps": 10},
        "mc": {"master_seed": 123},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))

    blobs = []
    for tag, workers in (("w1", "1"), ("w4", "4")):
        out = tmp_path / tag
        code = cli.main(
            ["self-check", "--config", str(cfg_path), "--out", str(out), "--workers", workers]
        )
        assert code == 0
        blobs.append((out / "self_check.json").read_bytes())

    ok = blobs[0] == blobs[1]
    _report("self-check byte-identical across workers", ok)
    assert ok
    assert json.loads(blobs[0])["all_passed"] is True


# ---------------------------------------------------------------------------
# 10. numeric baseline: exact terminal variance, first-order weak error
# ---------------------------------------------------------------------------


def test_variance_baseline_and_weak_error_halving():
    # zero drift, unit volatility: Var(X_T) = T
    model = multitask_model(MultitaskParams(0.0))
    ensemble = simulate_terminal_measure(
        model, _zero, _zero, 100_000, SimGrid(1.0, 16), SeedSpec(314).child(0)
    )
    var = variance_se(ensemble.samples)
    var_ok = abs(var.value - 1.0) <= 3.0 * var.se

    # kappa_bar = 0 with slope gamma(t) = 1 + t sampled at left endpoints:
    # the exact value is int(gamma) - int(gamma^2)/2 = 1/3 and the scheme's
    # weak error is the left-endpoint quadrature term, linear in dt.
    target = 1.0 / 3.0
    errors = []
    for steps in (4, 8):
        knots = np.linspace(0.0, 1.0, steps + 1)
        zeros = np.zeros(steps)
        policy = PolicyParam(
            knots=knots,
            gamma_c0=1.0 + knots[:-1],
            gamma_c1=zeros,
            aleph_c0=zeros,
            aleph_c1=zeros,
        )
        est = evaluate_limit_objective(
            model, policy, N_proxy=1_000_000, grid=SimGrid(1.0, steps),
            seed=SeedSpec(272).child(steps),
        )
        errors.append(abs(est.value - target))

    ratio = errors[0] / errors[1]
    weak_ok = errors[0] > errors[1] > 0 and ratio >= 1.7
    _report(
        f"terminal variance {var.value:.4f} (se {var.se:.4f}), "
        f"weak-error ratio {ratio:.2f}",
        var_ok and weak_ok,
    )
    assert var_ok, (var.value, var.se)
    assert weak_ok, (errors, ratio)
