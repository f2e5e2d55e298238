import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rangeloc.errors import InvalidArgument
from rangeloc.kinematics import (MotionMeasurement, NoiseSpec, RangeMeasurement, VehicleState, corrupt,
                                 integrate_exact, propagate_exact, propagate_midpoint, true_range, wrap_angle)

finite = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-math.pi, math.pi, allow_nan=False)


def rk4_reference(pose, v_of_t, w_of_t, dt, n=20000):
    """Classical RK4 on the unicycle ODE with time-varying inputs; the oracle for the closed forms."""
    h = dt / n
    x = np.array(pose, dtype=float)

    def f(t, s):
        return np.array([v_of_t(t) * math.cos(s[2]), v_of_t(t) * math.sin(s[2]), w_of_t(t)])

    t = 0.0
    for _ in range(n):
        k1 = f(t, x)
        k2 = f(t + h / 2, x + h / 2 * k1)
        k3 = f(t + h / 2, x + h / 2 * k2)
        k4 = f(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x


def test_straight_line_example():
    out = propagate_exact(VehicleState(0, 0, 0), 1.0, 0.0, 1.0)
    assert (out.x, out.y, out.heading) == pytest.approx((1.0, 0.0, 0.0), abs=1e-15)


def test_pure_rotation_example():
    out = propagate_exact(VehicleState(0, 0, 0), 0.0, math.pi / 2, 1.0)
    assert (out.x, out.y, out.heading) == pytest.approx((0.0, 0.0, math.pi / 2), abs=1e-15)


def test_quarter_circle_matches_fine_integration():
    out = propagate_exact(VehicleState(0, 0, 0), math.pi / 2, math.pi / 2, 1.0)
    assert (out.x, out.y, out.heading) == pytest.approx((1.0, 1.0, math.pi / 2), abs=1e-12)
    ref = rk4_reference((0, 0, 0), lambda t: math.pi / 2, lambda t: math.pi / 2, 1.0, n=2000)
    assert out.as_array() == pytest.approx(ref, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(finite, finite, angles, st.floats(-3, 3), st.floats(-2, 2), st.floats(0.01, 2))
def test_exact_arc_matches_rk4(x, y, th, v, w, dt):
    out = propagate_exact(VehicleState(x, y, th), v, w, dt).as_array()
    ref = rk4_reference((x, y, th), lambda t: v, lambda t: w, dt, n=400)
    assert out[:2] == pytest.approx(ref[:2], abs=1e-9)
    assert abs(wrap_angle(out[2] - ref[2])) < 1e-9


@settings(max_examples=300, deadline=None)
@given(finite, finite, angles, st.floats(-3, 3), st.floats(-3, 3), st.floats(1e-3, 3))
def test_exact_subdivision_consistency(x, y, th, v, w, dt):
    whole = propagate_exact(VehicleState(x, y, th), v, w, dt)
    half = propagate_exact(propagate_exact(VehicleState(x, y, th), v, w, dt / 2), v, w, dt / 2)
    assert abs(whole.x - half.x) < 1e-12 * max(1.0, abs(x) + abs(v * dt))
    assert abs(whole.y - half.y) < 1e-12 * max(1.0, abs(y) + abs(v * dt))
    assert abs(wrap_angle(whole.heading - half.heading)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(finite, finite, angles, st.floats(-3, 3), st.floats(1e-3, 3))
def test_straight_translation_is_exact(x, y, th, v, dt):
    out = propagate_exact(VehicleState(x, y, th), v, 0.0, dt)
    s0 = VehicleState(x, y, th)
    assert out.x == pytest.approx(x + v * dt * math.cos(s0.heading), abs=1e-12)
    assert out.y == pytest.approx(y + v * dt * math.sin(s0.heading), abs=1e-12)


def test_tiny_turn_uses_line_limit_without_cancellation():
    a = propagate_exact(VehicleState(0, 0, 0.3), 1.0, 1e-12, 1.0)
    b = propagate_exact(VehicleState(0, 0, 0.3), 1.0, 0.0, 1.0)
    assert a.x == pytest.approx(b.x, abs=1e-11) and a.y == pytest.approx(b.y, abs=1e-11)


@settings(max_examples=300)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_heading_always_normalized(x, y, th):
    h = VehicleState(x, y, th).heading
    assert -math.pi < h <= math.pi


def test_wrap_pi_boundary():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert np.all(wrap_angle(np.array([-math.pi, 3 * math.pi])) == math.pi)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_non_finite_inputs_rejected(bad):
    with pytest.raises(InvalidArgument):
        propagate_exact(VehicleState(0, 0, 0), bad, 0.0, 1.0)
    with pytest.raises(InvalidArgument):
        VehicleState(bad, 0, 0)


def test_non_positive_dt_rejected():
    with pytest.raises(InvalidArgument):
        propagate_exact(VehicleState(0, 0, 0), 1.0, 0.0, 0.0)


def mm(t, v, w, vid=0):
    return MotionMeasurement(vid, t, v, w)


def test_midpoint_constant_inputs():
    out = propagate_midpoint(VehicleState(0, 0, 0), mm(0.0, 1, 0), mm(0.05, 1, 0))
    assert out.as_array() == pytest.approx([0.05, 0, 0], abs=1e-15)


def test_midpoint_ramped_turn_rate():
    dt = 0.05
    out = propagate_midpoint(VehicleState(0, 0, 0), mm(0.0, 1, 0), mm(dt, 1, 0.2))
    assert out.heading == pytest.approx(0.005, abs=1e-15)
    ref = rk4_reference((0, 0, 0), lambda t: 1.0, lambda t: 0.2 * t / dt, dt, n=2000)
    assert np.hypot(out.x - ref[0], out.y - ref[1]) < dt ** 3


def test_midpoint_zero_velocity_keeps_state():
    s = VehicleState(1.5, -2.0, 0.7)
    out = propagate_midpoint(s, mm(1.0, 0, 0), mm(1.05, 0, 0))
    assert out == s


def test_midpoint_rejects_bad_intervals():
    with pytest.raises(InvalidArgument):
        propagate_midpoint(VehicleState(0, 0, 0), mm(1.0, 1, 0), mm(1.0, 1, 0))
    with pytest.raises(InvalidArgument):
        propagate_midpoint(VehicleState(0, 0, 0), mm(0.0, 1, 0), mm(0.1, 1, 0, vid=1))


def test_midpoint_local_error_is_third_order():
    # smooth inputs: halving dt must cut the one-step error by at least 4x
    v = lambda t: 1.0 + 0.5 * math.sin(2 * t)
    w = lambda t: 0.8 * math.cos(3 * t)
    errs = []
    for dt in (0.2, 0.1, 0.05):
        out = propagate_midpoint(VehicleState(0, 0, 0.4), mm(0.0, v(0), w(0)), mm(dt, v(dt), w(dt)))
        ref = rk4_reference((0, 0, 0.4), v, w, dt, n=400)
        errs.append(float(np.hypot(out.x - ref[0], out.y - ref[1])))
    assert errs[0] / errs[1] >= 4.0 and errs[1] / errs[2] >= 4.0


def test_true_range_examples():
    assert true_range(VehicleState(0, 0, 0), VehicleState(3, 4, 0)) == 5.0
    assert true_range(VehicleState(2, 2, 0), VehicleState(2, 2, 1)) == 0.0
    assert true_range(VehicleState(1, 1, 0), VehicleState(2, 2, 0)) == pytest.approx(math.sqrt(2), abs=1e-15)


@given(finite, finite, finite, finite)
def test_true_range_symmetric(x1, y1, x2, y2):
    a, b = VehicleState(x1, y1, 0), VehicleState(x2, y2, 0)
    assert true_range(a, b) == true_range(b, a)


def test_corrupt_noiseless_and_statistics():
    assert corrupt(3.25, 0.0, np.random.default_rng(0)) == 3.25
    draws = corrupt(np.full(100_000, 2.0), 0.1, np.random.default_rng(7))
    assert abs(draws.mean() - 2.0) < 1e-3
    assert abs(draws.std() - 0.1) < 0.005


def test_corrupt_deterministic_and_validated():
    a = corrupt(np.zeros(10), 0.3, np.random.default_rng(99))
    b = corrupt(np.zeros(10), 0.3, np.random.default_rng(99))
    assert np.array_equal(a, b)
    with pytest.raises(InvalidArgument):
        corrupt(1.0, -0.1, np.random.default_rng(0))


def test_value_types_validate():
    with pytest.raises(InvalidArgument):
        RangeMeasurement(1, 1, 2.0, 0.0)
    with pytest.raises(InvalidArgument):
        RangeMeasurement(1, 2, -0.5, 0.0)
    with pytest.raises(InvalidArgument):
        NoiseSpec(sigma_v=-1.0)
    assert RangeMeasurement(4, 2, 1.0, 0.0).pair == (2, 4)


def test_vectorized_integration_matches_scalar():
    rng = np.random.default_rng(3)
    v = rng.uniform(0, 1, 50)
    w = rng.uniform(-1, 1, 50)
    w[10] = 0.0
    out = integrate_exact(np.array([1.0, 2.0, 3.0]), v, w, 0.01)
    s = VehicleState(1.0, 2.0, 3.0)
    for k in range(50):
        s = propagate_exact(s, v[k], w[k], 0.01)
    assert out[-1, :2] == pytest.approx([s.x, s.y], abs=1e-12)
    assert abs(wrap_angle(out[-1, 2] - s.heading)) < 1e-12
