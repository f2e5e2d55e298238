"""NEES diagnostic for the collaborative filter.

Thirty seeded 30 s runs of the five-vehicle, two-anchor fleet with the filter
started from a prior draw around truth. The averaged NEES of the 9-dim
dynamic state at every filter step is compared with the two-sided 95%
chi-square band for 9 * runs degrees of freedom.
"""
import numpy as np
import pytest
from scipy.stats import chi2

from rangeloc.estimator import CollaborativeEstimator, FleetBelief
from rangeloc.kinematics import VehicleState, wrap_angle
from rangeloc.scenario import load_scenario
from rangeloc.simulation import build_truth, direct_frames, encoder_stream, spawn_streams

RUNS = 30
PRIOR = np.diag([0.1 ** 2, 0.1 ** 2, 0.05 ** 2])


def nees_series(base, seed, window):
    s = base.with_overrides(seed=seed, durations={"static": 0.0, "linear": 0.0, "run": 30.0},
                            init={**base.init, "mode": "truth"},
                            estimator={**base.estimator, "smoothing_window": window})
    streams = spawn_streams(seed)
    truth = build_truth(s, streams["trajectory"])
    enc = encoder_stream(truth, s, streams["encoder"])
    ids = sorted(s.ids)
    cols = [ids.index(k) for k in s.estimated_ids]
    rng = np.random.default_rng(10_000 + seed)
    init = {k: VehicleState.from_array(truth.poses[0, ids.index(k)] + rng.multivariate_normal(np.zeros(3), PRIOR))
            for k in s.estimated_ids}
    anchors = {k: truth.poses[0, ids.index(k), :2] for k in s.anchors}
    belief = FleetBelief.from_states(init, {k: PRIOR for k in s.estimated_ids}, anchors, 0.0)
    frames = direct_frames(s, truth, enc, streams["range"])
    first = next(frames)
    est = CollaborativeEstimator(belief, ids, s.filter_noise(), first.motion[cols], s.estimator_config())
    out = []
    for fd in frames:
        t = fd.frame / s.rates["frame"]
        est.push_ranges(t, fd.ranges)
        if fd.motion is not None:
            b = est.step(t, fd.motion[cols])
            e = b.poses - truth.poses[fd.frame][cols]
            e[:, 2] = wrap_angle(e[:, 2])
            e = e.ravel()
            out.append(float(e @ np.linalg.solve(b.covariance, e)))
    return np.array(out)


def anees(scenario_dir, window):
    base = load_scenario(scenario_dir / "two_anchor.yaml")
    a = np.mean([nees_series(base, seed, window) for seed in range(RUNS)], axis=0)
    lo, hi = chi2.ppf([0.025, 0.975], 9 * RUNS) / RUNS
    return a, lo, hi


def test_filter_consistent_without_range_smoothing(scenario_dir):
    a, lo, hi = anees(scenario_dir, 1)
    inside = np.mean((a > lo) & (a < hi))
    print(f"ANEES mean {a.mean():.2f}, band [{lo:.2f}, {hi:.2f}], steps inside {inside:.2f}")
    assert lo < a.mean() < hi
    assert inside > 0.8


@pytest.mark.xfail(strict=True, reason="with the default 5-sample smoothing the filter is conservative: the "
                   "smoothed ranges are less noisy than the sigma_range it assumes, ANEES ~6 vs band [7.5, 10.6]")
def test_filter_consistent_with_default_smoothing(scenario_dir):
    a, lo, hi = anees(scenario_dir, 5)
    assert lo < a.mean() < hi
