import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from drpo.dro import (FilterState, dual_minimum, dual_objective, exp_tilt_weights, filter_and_update,
                      hard_filter, lp_oracle, solve_dual_threshold, top_k_count,
                      variance_feedback_update)
from drpo.recsim import DomainError


def test_dual_threshold_examples():
    assert solve_dual_threshold([5, 4, 3, 2, 1], 0.4) == 4
    r = [0.3, 0.9, 0.1, 0.5]
    assert solve_dual_threshold(r, 1.0) == 0.1
    assert solve_dual_threshold([0.7] * 6, 0.3) == 0.7
    with pytest.raises(DomainError):
        solve_dual_threshold([], 0.5)
    with pytest.raises(DomainError):
        solve_dual_threshold([1.0], 0.0)


def test_dual_threshold_is_argmin_of_dual():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.uniform(size=rng.integers(1, 30))
        kappa = rng.choice(np.arange(1, 11) / 10)
        nu = solve_dual_threshold(r, kappa)
        _, best = dual_minimum(r, kappa)
        assert dual_objective(r, nu, kappa) == pytest.approx(best, abs=1e-12)


def test_lp_examples():
    sol = lp_oracle([1.0, 0.0], 0.5)
    assert list(sol.weights) == [2.0, 0.0] and sol.value == 1.0
    sol = lp_oracle([3.0, 2.0, 1.0], 2 / 3)
    np.testing.assert_allclose(sol.weights, [1.5, 1.5, 0.0])
    assert sol.value == pytest.approx(2.5)
    with pytest.raises(DomainError):
        lp_oracle([1.0], 1.5)


def test_lp_grid_oracle():
    # exhaustive grid over feasible weight vectors (step 1/8 of the cap) for 3 samples, kappa=2/3
    r = np.array([3.0, 2.0, 1.0])
    kappa = 2 / 3
    cap = 1 / kappa
    grid = np.linspace(0, cap, 25)
    best = -np.inf
    for w in itertools.product(grid, repeat=2):
        w3 = 3 - sum(w)
        if 0 <= w3 <= cap + 1e-12:
            best = max(best, (w[0] * r[0] + w[1] * r[1] + w3 * r[2]) / 3)
    assert lp_oracle(r, kappa).value == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_lp_matches_scipy_linprog(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    r = rng.pareto(1.5, n) if seed % 2 else rng.uniform(size=n)
    kappa = float(rng.uniform(0.05, 1.0))
    res = linprog(-r / n, A_eq=np.ones((1, n)) / n, b_eq=[1.0], bounds=[(0, 1 / kappa)] * n,
                  method="highs")
    assert lp_oracle(r, kappa).value == pytest.approx(-res.fun, rel=1e-9, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=64), st.integers(1, 10))
def test_strong_duality_property(rewards, k10):
    kappa = k10 / 10
    primal = lp_oracle(rewards, kappa).value
    _, dual = dual_minimum(rewards, kappa)
    assert abs(primal - dual) <= 1e-9 * max(1.0, abs(dual))


def test_hard_filter_examples():
    assert top_k_count(10, 0.5) == 5
    assert top_k_count(10, 0.05) == 1
    fb = hard_filter([0.9, 0.1, 0.8, 0.2], FilterState(top_p=0.5))
    assert list(fb.indices) == [0, 2]
    assert fb.threshold == 0.8
    np.testing.assert_allclose(fb.advantages, [0.1, 0.0])
    assert fb.normalized == pytest.approx(fb.advantages / (0.05 + 1e-8))


def test_hard_filter_ties_to_lower_index():
    fb = hard_filter([0.5, 0.7, 0.5, 0.5], FilterState(top_p=0.5))
    assert list(fb.indices) == [0, 1]


def test_equal_rewards_give_zero_normalized_advantages():
    fb = hard_filter([0.3] * 8, FilterState(top_p=0.5))
    assert np.array_equal(fb.normalized, np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=64), st.floats(0.05, 1.0))
def test_filter_advantages_nonnegative(rewards, p):
    fb = hard_filter(rewards, FilterState(top_p=p))
    assert np.all(fb.advantages >= 0) and np.all(fb.normalized >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=40), st.floats(0.05, 1.0), st.floats(0.1, 100))
def test_scale_equivariance(rewards, p, c):
    r = np.array(rewards)
    a = hard_filter(r, FilterState(top_p=p))
    b = hard_filter(c * r, FilterState(top_p=p))
    assert np.array_equal(a.indices, b.indices)
    assert b.threshold == pytest.approx(c * a.threshold, rel=1e-12)


def test_integer_kappa_n_weights_equal_scaled_indicator():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 64))
        k = int(rng.integers(1, n + 1))
        kappa = k / n
        r = rng.uniform(size=n)
        w = lp_oracle(r, kappa).weights
        fb = hard_filter(r, FilterState(top_p=kappa, min_p=0.0))
        ind = np.zeros(n)
        ind[fb.indices] = 1 / kappa
        np.testing.assert_allclose(w, ind, rtol=1e-12)


def test_controller_examples():
    s = variance_feedback_update(FilterState(top_p=0.5), 0.2, 1.0)
    assert s.top_p == pytest.approx(0.51)
    s = variance_feedback_update(FilterState(top_p=0.5), 0.6, 1.0)
    assert s.top_p == pytest.approx(0.49)
    s = variance_feedback_update(FilterState(top_p=1.0), 0.1, 1.0)
    assert s.top_p == 1.0
    # equality falls into the shrink branch
    s = variance_feedback_update(FilterState(top_p=0.5), 0.5, 1.0)
    assert s.top_p == pytest.approx(0.49)
    with pytest.raises(DomainError):
        variance_feedback_update(FilterState(), -1.0, 1.0)


def test_controller_fixed_points():
    up, down = FilterState(top_p=0.3), FilterState(top_p=0.3)
    prev_up, prev_down = up.top_p, down.top_p
    for _ in range(400):
        variance_feedback_update(up, 0.5 - 1e-3, 1.0)
        variance_feedback_update(down, 0.5 + 1e-3, 1.0)
        assert up.top_p >= prev_up and down.top_p <= prev_down
        prev_up, prev_down = up.top_p, down.top_p
    assert up.top_p == 1.0 and down.top_p == 0.05


def test_fixed_controller_keeps_p():
    s = FilterState(top_p=0.4, adaptive=False)
    variance_feedback_update(s, 0.0, 1.0)
    assert s.top_p == 0.4 and s.sigma_ratio == 0.0


def test_filter_and_update_records_state():
    s = FilterState(top_p=0.5)
    r = np.arange(10) / 10
    fb = filter_and_update(r, s)
    assert s.last_threshold == fb.threshold == 0.5
    assert s.sigma_ratio == pytest.approx(r[5:].std() / r.std())
    assert s.top_p == pytest.approx(0.51)


def test_exp_tilt():
    assert np.array_equal(exp_tilt_weights([0.4, 0.4, 0.4], 0.05), np.ones(3))
    w = exp_tilt_weights([1.0, 0.9], 0.05)
    assert w[0] / w[1] == pytest.approx(math.exp(2))
    assert w.mean() == pytest.approx(1.0)
    np.testing.assert_allclose(exp_tilt_weights([1.0, 0.2, 0.5], 1e9), np.ones(3))
    fb = hard_filter([0.9, 0.1, 0.8, 0.2], FilterState(top_p=0.5))
    np.testing.assert_allclose(exp_tilt_weights(fb, 0.05), exp_tilt_weights([0.9, 0.8], 0.05))
    with pytest.raises(DomainError):
        exp_tilt_weights([1.0], 0.0)
