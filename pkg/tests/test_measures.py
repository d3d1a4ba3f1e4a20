"""Tests for the empirical-measure layer: statistics, distances, CSV I/O."""

import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from palab.measures import (
    BatchedEmpiricalMeasure,
    EmpiricalMeasure,
    MeasureFlow,
    clamped_mean,
    load_measure_csv,
    moment,
    save_measure_csv,
    wasserstein_p,
)

EXACT = 1e-12
N_PROPERTY_TRIALS = 200


def test_basic_stats():
    m = EmpiricalMeasure([1.0, 2.0, 3.0, 6.0])
    assert m.mean() == 3.0
    assert moment(m, 1.0) == 3.0
    assert moment(m, 2.0) == (1 + 4 + 9 + 36) / 4.0
    assert len(m) == 4


def test_clamped_mean_examples():
    m = EmpiricalMeasure([3.0, -3.0])
    assert clamped_mean(m, 1.0) == 0.0
    m2 = EmpiricalMeasure([3.0, 1.0])
    assert clamped_mean(m2, 2.0) == 1.5
    # no clamp at b_bar = inf
    assert clamped_mean(m2, np.inf) == m2.mean()
    # clamp everything
    assert clamped_mean(EmpiricalMeasure([10.0, 20.0]), 0.5) == 0.5


def test_empty_or_2d_rejected():
    with pytest.raises(ValueError):
        EmpiricalMeasure([])
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((3, 2)))


def test_wasserstein_two_atoms():
    # {0, 0} vs {0, 2}: optimal coupling moves one atom of mass 1/2 by 2
    a = EmpiricalMeasure([0.0, 0.0])
    b = EmpiricalMeasure([0.0, 2.0])
    assert abs(wasserstein_p(a, b, 1.0) - 1.0) <= EXACT
    # p = 2: (0.5 * 4)^(1/2)
    assert abs(wasserstein_p(a, b, 2.0) - np.sqrt(2.0)) <= EXACT


def test_wasserstein_shift_identity():
    # W_p(mu, mu + c) = |c| for every p >= 1 (monotone coupling is a shift)
    rng = np.random.default_rng(101)
    for _ in range(50):
        x = rng.standard_normal(rng.integers(2, 60))
        c = float(rng.uniform(-3, 3))
        a = EmpiricalMeasure(x)
        b = EmpiricalMeasure(x + c)
        assert abs(wasserstein_p(a, b, 1.0) - abs(c)) <= EXACT
        assert abs(wasserstein_p(a, b, 2.0) - abs(c)) <= 1e-9


def test_wasserstein_self_distance_zero():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(33)
    m = EmpiricalMeasure(x)
    assert wasserstein_p(m, m, 1.0) == 0.0
    # same cloud presented in a different order
    m2 = EmpiricalMeasure(x[::-1].copy())
    assert wasserstein_p(m, m2, 1.0) == 0.0


def test_wasserstein_assignment_oracle():
    # Equal-size exact distance must agree with the optimal assignment
    # (Hungarian algorithm on the |x_i - y_j| cost matrix): the sorted
    # coupling is optimal in 1-D.
    rng = np.random.default_rng(2024)
    for _ in range(N_PROPERTY_TRIALS):
        n = int(rng.integers(2, 7))
        x = rng.uniform(-5, 5, n)
        y = rng.uniform(-5, 5, n)
        cost = np.abs(x[:, None] - y[None, :])
        ri, ci = linear_sum_assignment(cost)
        oracle = cost[ri, ci].mean()
        ours = wasserstein_p(EmpiricalMeasure(x), EmpiricalMeasure(y), 1.0)
        assert abs(ours - oracle) <= 1e-10, (x, y)


def test_wasserstein_triangle_equal_sizes():
    rng = np.random.default_rng(5)
    for _ in range(N_PROPERTY_TRIALS):
        n = int(rng.integers(2, 40))
        a = EmpiricalMeasure(rng.standard_normal(n) * rng.uniform(0.5, 2))
        b = EmpiricalMeasure(rng.standard_normal(n) + rng.uniform(-1, 1))
        c = EmpiricalMeasure(rng.standard_normal(n) * 0.3)
        dab = wasserstein_p(a, b, 1.0)
        dac = wasserstein_p(a, c, 1.0)
        dcb = wasserstein_p(c, b, 1.0)
        assert dab <= dac + dcb + EXACT


def test_wasserstein_triangle_unequal_sizes():
    # All three pairwise sizes distinct, so every pair goes through the same
    # quantile grid and the triangle inequality holds exactly on that grid.
    rng = np.random.default_rng(6)
    for _ in range(N_PROPERTY_TRIALS):
        na, nb, nc = rng.permutation([11, 23, 47])
        a = EmpiricalMeasure(rng.standard_normal(int(na)))
        b = EmpiricalMeasure(rng.standard_normal(int(nb)) + 0.5)
        c = EmpiricalMeasure(rng.uniform(-2, 2, int(nc)))
        dab = wasserstein_p(a, b, 1.0)
        dac = wasserstein_p(a, c, 1.0)
        dcb = wasserstein_p(c, b, 1.0)
        assert dab <= dac + dcb + 1e-9


def test_wasserstein_unequal_shift():
    # Shift identity survives the quantile-grid path when counts differ.
    rng = np.random.default_rng(8)
    x = rng.standard_normal(40)
    a = EmpiricalMeasure(x)
    b = EmpiricalMeasure(np.concatenate([x, x]) + 0.75)  # same law, doubled, shifted
    assert abs(wasserstein_p(a, b, 1.0) - 0.75) <= EXACT


def test_wasserstein_p_below_one_rejected():
    a = EmpiricalMeasure([0.0, 1.0])
    with pytest.raises(ValueError):
        wasserstein_p(a, a, 0.5)


def test_measure_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(42)
    x = rng.standard_normal(17)
    m = EmpiricalMeasure(x)
    path = tmp_path / "m.csv"
    save_measure_csv(m, path)
    back = load_measure_csv(path)
    assert np.array_equal(back.samples, m.samples)  # repr() roundtrips floats


def test_measure_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("value\n1.0\n")
    with pytest.raises(ValueError):
        load_measure_csv(path)


def test_flow_validation():
    times = np.array([0.0, 0.5, 1.0])
    ms = [EmpiricalMeasure(np.arange(1, 5, dtype=float)) for _ in range(3)]
    flow = MeasureFlow(times, ms)
    assert len(flow) == 3
    assert flow.terminal is ms[-1]
    assert flow.at(1) is ms[1]
    with pytest.raises(ValueError):
        MeasureFlow(times, ms[:2])  # length mismatch
    with pytest.raises(ValueError):
        MeasureFlow(
            np.array([0.0, 1.0]),
            [EmpiricalMeasure([1.0, 2.0]), EmpiricalMeasure([1.0, 2.0, 3.0])],
        )


def test_flow_single():
    m = EmpiricalMeasure([1.0, 2.0])
    flow = MeasureFlow.single(1.0, m)
    assert len(flow) == 1 and flow.terminal is m


def test_batched_measure_matches_rowwise():
    rng = np.random.default_rng(11)
    states = rng.standard_normal((5, 64))
    bm = BatchedEmpiricalMeasure(states)
    assert len(bm) == 64
    for stat, args in [("mean", ()), ("moment", (2.0,)), ("clamped_mean", (0.7,))]:
        col = getattr(bm, stat)(*args)
        assert col.shape == (5, 1)
        for i in range(5):
            row = EmpiricalMeasure(states[i])
            assert abs(col[i, 0] - getattr(row, stat)(*args)) <= EXACT
    with pytest.raises(ValueError):
        BatchedEmpiricalMeasure(np.zeros(3))


def test_quantiles_left_continuous():
    m = EmpiricalMeasure([3.0, 1.0, 2.0])
    levels = np.array([0.0, 0.2, 0.34, 0.5, 0.99])
    q = m.quantiles(levels)
    assert np.array_equal(q, [1.0, 1.0, 2.0, 2.0, 3.0])
