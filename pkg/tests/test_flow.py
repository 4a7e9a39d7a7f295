import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propcredit.flow import (
    PRESETS,
    FlowError,
    build_flow_grid,
    flow_sigma,
    flow_weights,
    native_flow_weights,
    poly_factor,
    proportional_flow_weights,
    shift_time,
    uniform_flow_weights,
)


def test_grid_endpoints_and_steps():
    g = build_flow_grid(16, 3.0)
    assert g.t[0] == 1.0 and g.t[-1] == 0.0
    assert g.N == 16 and len(g.dt) == 16
    assert np.all(g.dt > 0)
    assert g.dt.sum() == pytest.approx(1.0, abs=1e-15)


def test_shift_concentrates_steps_near_noise():
    g = build_flow_grid(16, 3.0)
    # shift > 1 gives short steps at high t and long steps at low t
    assert g.dt[0] < g.dt[-1]


def test_unit_shift_is_uniform():
    g = build_flow_grid(10, 1.0)
    np.testing.assert_allclose(g.dt, 0.1, rtol=1e-12)


def test_shift_time_by_hand():
    assert shift_time(0.5, 3.0) == pytest.approx(0.75)


@pytest.mark.parametrize("N, shift", [(0, 3.0), (4, 0.5)])
def test_bad_grid(N, shift):
    with pytest.raises(FlowError):
        build_flow_grid(N, shift)


def test_flowgrpo_sigma_borrows_next_point():
    g = build_flow_grid(10, 3.0)
    s = flow_sigma(g, "flowgrpo", 0.7)
    assert s.t_one_approx == g.t[1]
    assert s.sigma[0] == pytest.approx(0.7 * np.sqrt(g.t[1] / (1 - g.t[1])))
    np.testing.assert_allclose(s.sigma[1:], 0.7 * np.sqrt(g.t[1:-1] / (1 - g.t[1:-1])))


def test_sigma_errors():
    g = build_flow_grid(4)
    with pytest.raises(FlowError):
        flow_sigma(g, "constant", 0.0)
    with pytest.raises(FlowError):
        flow_sigma(g, "exotic", 0.3)
    with pytest.raises(FlowError):
        flow_sigma(build_flow_grid(1), "flowgrpo", 0.7)


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_preset_weight_identities(preset):
    p = PRESETS[preset]
    g = build_flow_grid(p["N"], 3.0)
    s = flow_sigma(g, p["kind"], p["eta"])
    nat = native_flow_weights(g, s)
    prop = proportional_flow_weights(g, s)
    uni = uniform_flow_weights(g, s)
    np.testing.assert_allclose(nat.w * s.sigma / np.sqrt(g.dt), poly_factor(g.t_steps), rtol=1e-12)
    ratio = prop.w / g.dt
    assert np.max(np.abs(ratio / ratio[0] - 1)) <= 1e-12
    assert prop.w.sum() == pytest.approx(nat.w.sum(), rel=1e-12)
    assert uni.w.sum() == pytest.approx(nat.w.sum(), rel=1e-12)
    assert np.ptp(uni.w) <= 1e-15 * uni.w[0]


def test_flow_weights_dispatch():
    g = build_flow_grid()
    s = flow_sigma(g)
    assert flow_weights(g, s, "proportional").mode == "proportional"
    with pytest.raises(FlowError):
        flow_weights(g, s, "bogus")


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.floats(1.0, 10.0), st.floats(0.05, 2.0))
def test_proportional_sum_preserved(N, shift, eta):
    g = build_flow_grid(N, shift)
    s = flow_sigma(g, "constant", eta)
    nat, prop = native_flow_weights(g, s), proportional_flow_weights(g, s)
    assert prop.w.sum() == pytest.approx(nat.w.sum(), rel=1e-12)
    assert np.all(prop.w > 0)


def test_native_weight_by_hand():
    g = build_flow_grid(16, 1.0)
    s = flow_sigma(g, "constant", 0.3)
    i = int(np.flatnonzero(np.isclose(g.t_steps, 0.5))[0])
    assert native_flow_weights(g, s).w[i] == pytest.approx(0.25 / 0.3 * 1.125, rel=1e-12)
    assert poly_factor(0.0) == 1.0 and poly_factor(1.0) == 1.0


@pytest.mark.parametrize("N, t, expected", [(2, 0.5, 0.7), (5, 0.8, 1.4)])
def test_flowgrpo_sigma_by_hand(N, t, expected):
    g = build_flow_grid(N, 1.0)
    s = flow_sigma(g, "flowgrpo", 0.7)
    assert g.t_steps[1] == pytest.approx(t)
    assert s.sigma[1] == pytest.approx(expected, rel=1e-12)


def test_two_step_proportional_by_hand():
    g = build_flow_grid(2, 3.0)
    np.testing.assert_allclose(g.dt, [0.25, 0.75], rtol=1e-12)
    s = flow_sigma(g, "constant", 0.3)
    nat = native_flow_weights(g, s).w
    prop = proportional_flow_weights(g, s)
    assert prop.zeta == pytest.approx(nat.sum())
    np.testing.assert_allclose(prop.w, [0.25 * prop.zeta, 0.75 * prop.zeta], rtol=1e-12)


def test_uniform_grid_proportional_is_flat_but_native_is_not():
    g = build_flow_grid(16, 1.0)
    s = flow_sigma(g, "constant", 0.3)
    prop = proportional_flow_weights(g, s)
    np.testing.assert_allclose(prop.w, prop.zeta / 16, rtol=1e-12)
    assert np.ptp(native_flow_weights(g, s).w) > 0


def test_uniform_versus_native_by_step_length():
    g = build_flow_grid(16, 3.0)
    s = flow_sigma(g, "constant", 0.3)
    nat, uni = native_flow_weights(g, s).w, uniform_flow_weights(g, s).w
    # native weight grows like sqrt(dt), so the flat scheme under-weights the
    # long low-noise steps and over-weights the short high-noise ones
    assert uni[-1] < nat[-1]
    assert uni[0] > nat[0]
    assert np.all(np.diff(np.sign(uni - nat)) <= 0)
