import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bisect_sigma, weight_of_sigma
from propcredit.schedules import (
    ScheduleError,
    SolverError,
    _ab,
    admissible_sigma_roots,
    build_train_schedule,
    credit_coefficient,
    ddim_sigma,
    default_schedule,
    make_ddim_schedule,
    min_feasible_weight,
    native_weights,
    reengineer,
    select_steps,
    solve_constant_sigma,
    target_weight,
    train_schedule_from_betas,
)


def test_scaled_linear_endpoints():
    s = build_train_schedule()
    assert s.T_train == 1000
    assert s.beta[0] == pytest.approx(8.5e-4, rel=1e-12)
    assert s.beta[-1] == pytest.approx(1.2e-2, rel=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_linear_kind_and_bad_kind():
    s = build_train_schedule(10, 0.1, 0.2, "linear")
    np.testing.assert_allclose(np.diff(s.beta), np.full(9, 0.1 / 9), rtol=1e-12)
    with pytest.raises(ScheduleError):
        build_train_schedule(kind="cosine")


@pytest.mark.parametrize("beta", [[0.0, 0.1], [0.5, 1.0], [np.nan]])
def test_bad_betas_rejected(beta):
    with pytest.raises(ScheduleError):
        train_schedule_from_betas(beta)


def test_select_steps():
    steps = select_steps(1000, 50)
    assert len(steps) == 50 and steps[-1] == 999 and steps[0] == 19
    np.testing.assert_array_equal(select_steps(10, 10), np.arange(10))
    with pytest.raises(ScheduleError):
        select_steps(10, 11)


def test_eta_zero_gives_zero_sigma_and_is_refused_for_rl():
    base = build_train_schedule()
    s = make_ddim_schedule(base, 50, 0.0, rl=False)
    assert np.all(s.sigma == 0.0)
    with pytest.raises(ScheduleError):
        make_ddim_schedule(base, 50, 0.0)


def test_ddim_sigma_formula_by_hand():
    ab_t, ab_p = 0.5, 0.8
    expected = math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    assert ddim_sigma(ab_t, ab_p, 1.0) == pytest.approx(expected, rel=1e-15)


def test_credit_coefficient_by_hand():
    s = default_schedule()
    k = 7
    ab_t, ab_p, sig = s.alpha_bar_t[k], s.alpha_bar_prev[k], s.sigma[k]
    c = math.sqrt(1 - ab_t) / math.sqrt(ab_t / ab_p) - math.sqrt(1 - ab_p - sig**2)
    assert credit_coefficient(s, k) == pytest.approx(c, rel=1e-14)


def test_native_weight_profile_shape():
    prof = native_weights(default_schedule())
    assert prof.w.shape == (50,)
    assert np.all(prof.w > 0) and not prof.reengineered
    # the lowest-noise step carries by far the largest native weight
    assert np.argmax(prof.w) == 0
    assert target_weight(prof) == pytest.approx(np.mean(prof.w))


@pytest.mark.parametrize("K", [5, 10, 20, 50, 100])
def test_full_eta_sigma_minimises_weight_per_step(K):
    s = default_schedule(K, 1.0)
    a, b = _ab(s)
    w_min = np.sqrt(a * a / b - 1.0)
    np.testing.assert_allclose(native_weights(s).w, w_min, rtol=1e-10)
    assert min_feasible_weight(s) == pytest.approx(np.max(w_min), rel=1e-15)


def test_mean_weight_is_infeasible_at_full_eta():
    s = default_schedule()
    with pytest.raises(SolverError) as exc:
        solve_constant_sigma(s, target_weight(native_weights(s)))
    assert exc.value.step >= 0


def test_small_eta_makes_mean_weight_feasible():
    s = default_schedule(50, 0.02)
    w_star = target_weight(native_weights(s))
    prof = solve_constant_sigma(s, w_star)
    assert np.max(np.abs(prof.w - w_star)) <= 1e-9


@pytest.mark.parametrize("K", [5, 10, 20, 50])
def test_reengineer_constant_weight(K):
    s = default_schedule(K)
    s_t, prof, loss_w = reengineer(s)
    assert np.max(np.abs(prof.w - prof.w_star)) <= 1e-9
    assert prof.w_star == pytest.approx(min_feasible_weight(s), rel=1e-15)
    assert loss_w * K == pytest.approx(np.sum(native_weights(s).w), rel=1e-12)
    np.testing.assert_array_equal(s_t.sigma, prof.sigma_tilde)


def test_solver_example_without_root():
    assert admissible_sigma_roots(1.0, 1.0, 1.0) == []


def test_solver_rejects_nonpositive_target():
    with pytest.raises(ScheduleError):
        solve_constant_sigma(default_schedule(), 0.0)


@st.composite
def triples(draw):
    b = draw(st.floats(1e-3, 0.99))
    a = math.sqrt(b) * draw(st.floats(1.001, 50.0))
    w_min = math.sqrt(a * a / b - 1.0)
    w = w_min * draw(st.floats(1.0 + 1e-6, 20.0))
    return a, b, w


@settings(max_examples=300, deadline=None)
@given(triples())
def test_roots_match_bisection(abw):
    a, b, w = abw
    roots = admissible_sigma_roots(a, b, w)
    assert 1 <= len(roots) <= 2
    for s in roots:
        ref = bisect_sigma(a, b, w, s)
        assert abs(s - ref) <= 1e-9 * max(1.0, ref) + 1e-12
        assert abs(weight_of_sigma(a, b, s) - w) <= 1e-8 * w


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.floats(0.05, 1.0))
def test_native_weights_positive_and_finite(K, eta):
    w = native_weights(default_schedule(K, eta)).w
    assert np.all(np.isfinite(w)) and np.all(w > 0)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([5, 10, 20, 50]), st.floats(0.05, 0.95))
def test_fixed_point_below_full_eta(K, eta):
    s = default_schedule(K, eta)
    a, b = _ab(s)
    w = native_weights(s).w
    for k in range(K):
        roots = admissible_sigma_roots(a[k], b[k], w[k])
        assert min(abs(r - s.sigma[k]) for r in roots) <= 1e-10


def test_zero_betas_rejected():
    with pytest.raises(ScheduleError):
        build_train_schedule(2, 0.0, 0.0, "linear")


def test_linear_schedule_last_step_sigma():
    s = make_ddim_schedule(build_train_schedule(1000, 1e-4, 0.02, "linear"), 50, 1.0)
    ab_t, ab_p = s.alpha_bar_t[-1], s.alpha_bar_prev[-1]
    assert ab_p == s.base.alpha_bar[s.steps[-2]]
    expected = math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    assert s.sigma[-1] == pytest.approx(expected, rel=1e-14)


def test_credit_at_variance_boundary():
    s = default_schedule(10, 0.5)
    k = 4
    b = 1 - s.alpha_bar_prev[k]
    a = math.sqrt(1 - s.alpha_bar_t[k]) / math.sqrt(s.alpha_t[k])
    # sigma^2 = b itself is outside the sampler's domain, so approach it from inside
    for gap in (1e-8, 1e-12):
        edge = s.sigma.copy()
        edge[k] = math.sqrt(b * (1 - gap))
        c = credit_coefficient(s.with_sigma(edge), k)
        assert abs(c - a) <= 2 * math.sqrt(b * gap)
    with pytest.raises(ScheduleError):
        edge[k] = math.sqrt(b) * (1 + 1e-12)
        s.with_sigma(edge)


def test_target_weight_is_arithmetic_mean():
    from propcredit.schedules import CreditProfile

    assert target_weight(CreditProfile(w=np.array([1.0, 3.0]), C=np.ones(2))) == 2.0
    assert target_weight(CreditProfile(w=np.full(4, 0.7), C=np.ones(4))) == pytest.approx(0.7)


def test_default_native_weights_are_volatile():
    w = native_weights(default_schedule()).w
    assert w.max() / w.min() >= 10.0


def test_smallest_constant_weight_is_near_4_5():
    # the diagnostic value of 4.5 is met by the smallest feasible constant,
    # not by the arithmetic mean of the native weights (about 0.53 here)
    s = default_schedule()
    assert abs(min_feasible_weight(s) - 4.5) <= 0.3 * 4.5
    assert target_weight(native_weights(s)) < 1.0
