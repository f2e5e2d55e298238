import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rangeloc.errors import DegenerateConfiguration, InconsistentRanges, InitializationError, NotReady
from rangeloc.initializer import (HEADING_FLOOR, AdjacencyMatrix, HeadingInitializer, LinearMotionWindow,
                                  classical_mds, detect_linear_motion, establish_frame, fix_gauge,
                                  initial_heading, refine_positions, resolve_y_sign, stress, trilaterate)
from rangeloc.kinematics import MotionMeasurement


def dist_matrix(p):
    p = np.asarray(p, dtype=float)
    return np.linalg.norm(p[:, None] - p[None], axis=-1)


def pairwise_error(p, q):
    return float(np.max(np.abs(dist_matrix(p) - dist_matrix(q))))


def circle_intersection(d1, d2, b, y_sign):
    """Textbook two-circle intersection (radical line form), the trilateration oracle."""
    a = (d1 ** 2 - d2 ** 2 + b ** 2) / (2 * b)
    h = math.sqrt(max(d1 ** 2 - a ** 2, 0.0))
    return np.array([a, y_sign * h])


def spread_layout(rng, n):
    while True:
        p = rng.uniform(0, 12, (n, 2))
        if dist_matrix(p)[np.triu_indices(n, 1)].min() > 1.5:
            sv = np.linalg.svd(p - p.mean(0), compute_uv=False)
            if sv[1] > 2.0:
                return p


def test_adjacency_symmetrized_with_zero_diagonal():
    D = AdjacencyMatrix([[1.0, 2.0, 3.0], [2.2, 0.0, 1.0], [3.0, 1.0, 0.5]])
    assert np.allclose(D.entries, D.entries.T) and np.all(np.diag(D.entries) == 0)
    assert D.entries[0, 1] == pytest.approx(2.1)
    samples = np.array([dist_matrix([[0, 0], [1, 0], [0, 1]])] * 3)
    samples[1, 0, 2] = samples[1, 2, 0] = np.nan
    assert AdjacencyMatrix.from_samples(samples).complete


def test_mds_equilateral():
    D = AdjacencyMatrix(np.ones((3, 3)) - np.eye(3))
    p = classical_mds(D)
    assert np.abs(dist_matrix(p) - D.entries).max() < 1e-9


def test_mds_collinear_flagged():
    with pytest.raises(DegenerateConfiguration):
        classical_mds(AdjacencyMatrix(dist_matrix([[0, 0], [1, 0], [2, 0], [3.5, 0]])))


def test_mds_noisy_square():
    rng = np.random.default_rng(11)
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
    noisy = dist_matrix(sq) + np.triu(rng.normal(0, 0.01, (4, 4)), 1)
    p = classical_mds(AdjacencyMatrix(np.triu(noisy) + np.triu(noisy, 1).T))
    assert pairwise_error(p, sq) < 0.05


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(3, 5))
def test_noiseless_pipeline_reproduces_distances(seed, n):
    rng = np.random.default_rng(seed)
    p = spread_layout(rng, n)
    D = AdjacencyMatrix(dist_matrix(p))
    q, frame = fix_gauge(classical_mds(D), 0, 1)
    res = refine_positions(q, D, frame)
    assert pairwise_error(res.points, p) < 1e-9
    assert np.all(res.points[0] == 0.0) and res.points[1, 1] == 0.0 and res.points[1, 0] > 0


def test_fix_gauge_properties_and_reflection_hints():
    rng = np.random.default_rng(12)
    p = spread_layout(rng, 5)
    theta = 0.8
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    moved = p @ R.T + [3.0, -7.0]
    reflected = moved * [1, -1]
    q1, f1 = fix_gauge(moved, 2, 4)
    assert np.all(q1[2] == 0.0) and q1[4, 1] == 0.0 and q1[4, 0] > 0
    hints = {0: 1 if q1[0, 1] > 0 else -1}
    a, _ = fix_gauge(moved, 2, 4, hints)
    b, fb = fix_gauge(reflected, 2, 4, hints)
    assert np.allclose(a, b, atol=1e-12)
    assert fb.reflected != f1.reflected or fb.reflected
    with pytest.raises(DegenerateConfiguration):
        fix_gauge(np.zeros((3, 2)), 0, 1)


def test_refine_from_truth_stays_put():
    rng = np.random.default_rng(13)
    p = spread_layout(rng, 5)
    q, frame = fix_gauge(p, 0, 1)
    res = refine_positions(q, AdjacencyMatrix(dist_matrix(p)), frame)
    assert np.abs(res.points - q).max() < 1e-9


def test_refine_from_mds_reaches_zero_stress():
    rng = np.random.default_rng(14)
    p = spread_layout(rng, 5)
    D = AdjacencyMatrix(dist_matrix(p))
    q, frame = fix_gauge(classical_mds(D), 0, 1)
    res = refine_positions(q, D, frame)
    assert stress(res.points, D) < 1e-12


def test_refine_monotone_and_accurate_under_noise():
    rng = np.random.default_rng(15)
    sigma = 0.1
    errs = []
    for _ in range(50):
        p = spread_layout(rng, 5)
        truth, _ = fix_gauge(p, 0, 1)
        noise = np.triu(rng.normal(0, sigma, (5, 5)), 1)
        D = AdjacencyMatrix(dist_matrix(p) + noise + noise.T)
        q, frame = fix_gauge(classical_mds(D), 0, 1, {k: np.sign(truth[k, 1]) for k in (2, 3, 4)})
        res = refine_positions(q, D, frame)
        assert np.all(np.diff(res.costs) <= 0) and res.cost <= res.initial_cost
        errs.append(np.sqrt(np.mean(np.sum((res.points - truth) ** 2, axis=1))))
    assert np.sqrt(np.mean(np.square(errs))) < 3 * sigma


def test_refine_hits_cap_gracefully():
    rng = np.random.default_rng(16)
    p = spread_layout(rng, 5)
    D = AdjacencyMatrix(dist_matrix(p) + 0.3)
    q, frame = fix_gauge(classical_mds(D), 0, 1)
    res = refine_positions(q, D, frame, max_iter=1)
    assert res.iterations == 1 and res.cost <= res.initial_cost


def window_with(v, w, size=20, gamma_omega=0.01, gamma_v=0.25):
    win = LinearMotionWindow(size, gamma_omega, gamma_v)
    for k in range(size):
        win.push(MotionMeasurement(0, 0.05 * k, float(np.broadcast_to(v, size)[k]), float(np.broadcast_to(w, size)[k])))
    return win


def test_detector_examples():
    assert detect_linear_motion(window_with(1.0, 0.0))
    assert not detect_linear_motion(window_with(0.0, 0.0))
    assert not detect_linear_motion(window_with(0.0, 2.0))
    assert not detect_linear_motion(LinearMotionWindow(20, 0.01, 0.25))


def test_detector_noise_scaled_threshold_fires():
    rng = np.random.default_rng(17)
    hits = sum(detect_linear_motion(window_with(1.0, rng.normal(0, 0.1, 20), gamma_omega=4 * 0.1 ** 2))
               for _ in range(2000))
    assert hits / 2000 > 0.99


@settings(max_examples=200)
@given(st.lists(st.floats(-0.3, 0.3), min_size=20, max_size=20), st.lists(st.floats(-5, 5), min_size=20,
                                                                           max_size=20))
def test_detector_never_fires_below_speed_threshold(v, w):
    win = window_with(np.array(v), np.array(w), gamma_v=0.1)
    if win.energies()[1] <= win.gamma_v:
        assert not detect_linear_motion(win)


def test_default_thresholds_at_simulation_noise():
    # the detector must see 0.5 m/s straight driving and ignore a parked vehicle at the default noise
    win = LinearMotionWindow.from_noise(0.2, 0.1)
    rng = np.random.default_rng(18)
    moving = parked = 0
    for _ in range(500):
        moving += detect_linear_motion(window_with(0.5 + rng.normal(0, 0.2, 20), rng.normal(0, 0.1, 20),
                                                   gamma_omega=win.gamma_omega, gamma_v=win.gamma_v))
        parked += detect_linear_motion(window_with(rng.normal(0, 0.2, 20), rng.normal(0, 0.1, 20),
                                                   gamma_omega=win.gamma_omega, gamma_v=win.gamma_v))
    assert moving > 400 and parked < 5


def test_trilaterate_examples():
    assert trilaterate(math.sqrt(2), math.sqrt(2), 2.0, 1) == pytest.approx([1, 1], abs=1e-12)
    assert trilaterate(1.0, 2.0, 3.0, 1) == pytest.approx([1, 0], abs=1e-12)
    assert trilaterate(5.0, 5.0, 6.0, -1) == pytest.approx([3, -4], abs=1e-12)
    with pytest.raises(InconsistentRanges):
        trilaterate(1.0, 1.0, 5.0)


def test_trilaterate_matches_circle_oracle():
    rng = np.random.default_rng(19)
    worst = 0.0
    for _ in range(1000):
        b = rng.uniform(1, 15)
        p = np.array([rng.uniform(-10, 20), rng.uniform(0.05, 10)])
        sign = 1 if rng.random() < 0.5 else -1
        p[1] *= sign
        d1, d2 = np.hypot(*p), np.hypot(*(p - [b, 0]))
        out = trilaterate(d1, d2, b, sign)
        worst = max(worst, np.abs(out - circle_intersection(d1, d2, b, sign)).max(), np.abs(out - p).max())
        assert abs(np.hypot(*out) - d1) < 1e-9 and abs(np.hypot(*(out - [b, 0])) - d2) < 1e-9
    assert worst < 1e-9


def test_initial_heading_examples():
    assert initial_heading([(0, 0), (1, 0), (2, 0)]) == pytest.approx(0.0, abs=1e-15)
    assert initial_heading([(0, 0), (0, 1)]) == pytest.approx(math.pi / 2, abs=1e-15)
    assert initial_heading([(2, 0), (1, 0), (0, 0)]) == pytest.approx(math.pi, abs=1e-15)
    with pytest.raises(NotReady):
        initial_heading([(0, 0), (0.05, 0)])


def test_initial_heading_noisy_track():
    rng = np.random.default_rng(20)
    s = np.linspace(0, 2, 20)
    d = np.array([math.cos(math.pi / 6), math.sin(math.pi / 6)])
    track = s[:, None] * d + rng.normal(0, 0.05, (20, 2))
    assert abs(initial_heading(track) - math.pi / 6) < 0.05


@settings(max_examples=200)
@given(st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 2 ** 31))
def test_initial_heading_invariances(alpha, tx, ty, seed):
    rng = np.random.default_rng(seed)
    track = np.cumsum(rng.uniform(0.1, 0.3, (10, 1)) * [1.0, 0.0] + rng.normal(0, 0.01, (10, 2)), axis=0)
    h0 = initial_heading(track)
    assert initial_heading(track + [tx, ty]) == pytest.approx(h0, abs=1e-9)
    R = np.array([[math.cos(alpha), -math.sin(alpha)], [math.sin(alpha), math.cos(alpha)]])
    h1 = initial_heading(track @ R.T)
    assert abs(math.remainder(h1 - h0 - alpha, 2 * math.pi)) < 1e-9


def test_heading_initializer_noiseless_track():
    rng = np.random.default_rng(21)
    p = spread_layout(rng, 3)
    D = AdjacencyMatrix(dist_matrix(p))
    rep = establish_frame(D, 0, 1, {2: 1 if fix_gauge(p, 0, 1)[0][2, 1] > 0 else -1})
    start = rep.positions[2]
    b = rep.frame.baseline
    heading = 0.4
    win = LinearMotionWindow(5, 1e-4, 0.01)
    hi = HeadingInitializer(2, rep.frame, 1 if start[1] > 0 else -1, win)
    for k in range(40):
        pos = start + 0.025 * k * np.array([math.cos(heading), math.sin(heading)])
        hi.feed(MotionMeasurement(2, 0.05 * k, 0.5, 0.0), float(np.hypot(*pos)), float(np.hypot(*(pos - [b, 0]))))
    assert hi.ready()
    pose, cov = hi.result(at_time=0.05 * 39)
    assert pose.heading == pytest.approx(heading, abs=1e-9)
    assert [pose.x, pose.y] == pytest.approx(list(pos), abs=1e-9)
    assert cov[2, 2] == pytest.approx(HEADING_FLOOR ** 2)


def test_resolve_y_sign():
    assert resolve_y_sign(3.0, 0.1) == 1
    assert resolve_y_sign(-3.0, 0.1) == -1
    assert resolve_y_sign(-3.0, 0.1, hint=1) == 1
    with pytest.raises(InitializationError):
        resolve_y_sign(0.1, 0.1)
