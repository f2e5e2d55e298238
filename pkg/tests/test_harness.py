import csv
import math

import numpy as np
import pytest
import yaml

from rangeloc.cli import EXIT_INIT, EXIT_SCENARIO, main
from rangeloc.errors import InitializationError, InvalidArgument, ScenarioError
from rangeloc.metrics import compute_metrics
from rangeloc.outputs import MC_COLUMNS, SUMMARY_COLUMNS, write_run
from rangeloc.scenario import load_scenario, scenario_from_dict
from rangeloc.simulation import monte_carlo, observability_report, replay_scenario, run_scenario
from rangeloc.uwb_net import read_packet_log


@pytest.fixture(scope="module")
def base_dict(scenario_dir):
    with open(scenario_dir / "two_anchor.yaml") as fh:
        return yaml.safe_load(fh)


@pytest.fixture(scope="module")
def short_uwb(scenario_dir):
    s = load_scenario(scenario_dir / "two_anchor_uwb.yaml")
    return s.with_overrides(durations={**s.durations, "run": 4.0})


def variant(d, **top):
    out = yaml.safe_load(yaml.safe_dump(d))
    out.update(top)
    return out


# ---- scenario validation ----------------------------------------------------------------------------------------

def test_scenario_files_load(scenario_dir):
    for path in sorted(scenario_dir.glob("*.yaml")):
        s = load_scenario(path, min_vehicles=2)
        assert s.ids and s.dynamic_ids


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["vehicles"].__setitem__(3, {**d["vehicles"][3], "id": 2}), "unique"),
    (lambda d: d["vehicles"].__setitem__(2, {**d["vehicles"][2], "pose": [30.0, 5.0, 0.0]}), "outside"),
    (lambda d: d["vehicles"].__setitem__(2, {**d["vehicles"][2], "pose": [1.05, 1.0, 0.0]}), "closer"),
    (lambda d: d.__setitem__("vehicles", d["vehicles"][:2] + d["vehicles"][2:3][:0]), "at least"),
    (lambda d: d["durations"].__setitem__("run", 0.0), "run duration"),
    (lambda d: d["durations"].__setitem__("run", 0.013), "whole number"),
    (lambda d: d["network"].__setitem__("mode", "carrier-pigeon"), "network.mode"),
    (lambda d: d["estimator"].__setitem__("anchors_used", 3), "anchors_used"),
    (lambda d: d.__setitem__("colour", "blue"), "unknown"),
    (lambda d: d["vehicles"][2]["trajectory"].__setitem__("kind", "teleport"), "trajectory kind"),
    (lambda d: d["vehicles"][2].__setitem__("y_sign", 0), "y_sign"),
])
def test_invalid_scenarios_rejected(base_dict, mutate, message):
    d = variant(base_dict)
    mutate(d)
    with pytest.raises(ScenarioError, match=message):
        scenario_from_dict(d)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    with pytest.raises(ScenarioError):
        load_scenario(bad)


# ---- metrics ----------------------------------------------------------------------------------------------------

def test_metrics_examples():
    t = np.arange(5) * 0.05
    truth = np.zeros((5, 2, 3))
    truth[:, :, 0] = np.arange(5)[:, None]
    m = compute_metrics(t, truth, truth, (2, 3))
    assert m.fleet_position_rmse() == 0.0 and m.fleet_heading_rmse() == 0.0
    est = truth.copy()
    est[:, :, 0] += 0.1
    assert compute_metrics(t, est, truth, (2, 3)).fleet_position_rmse() == pytest.approx(0.1)
    a, b = truth.copy(), truth.copy()
    a[:, :, 2], b[:, :, 2] = 3.1, -3.1
    assert compute_metrics(t, a, b, (2, 3)).fleet_heading_rmse() == pytest.approx(2 * math.pi - 6.2, abs=1e-12)
    with pytest.raises(InvalidArgument):
        compute_metrics(t, truth[:4], truth, (2, 3))
    with pytest.raises(InvalidArgument):
        compute_metrics(t, truth, truth, (2,))


def test_window_rmse_selects_fraction():
    t = np.arange(10.0)
    truth = np.zeros((10, 1, 3))
    est = truth.copy()
    est[5:, 0, 0] = 2.0
    m = compute_metrics(t, est, truth, (7,), baseline=truth)
    assert (m.window_rmse(0.0, 0.5), m.window_rmse(0.5, 1.0), m.final_error(baseline=True)) == (0.0, 2.0, 0.0)
    with pytest.raises(InvalidArgument):
        m.window_rmse(0.5, 0.5)


# ---- observability report ---------------------------------------------------------------------------------------

def test_observability_reports(scenario_dir):
    rep = observability_report(load_scenario(scenario_dir / "two_anchor.yaml"))
    assert (rep.rank, rep.columns, rep.verdict) == (9, 9, "FULL")
    rep = observability_report(load_scenario(scenario_dir / "no_anchor.yaml"))
    assert (rep.rank, rep.predicted_rank) == (rep.predicted_rank, 3 * 5 - 3)
    assert rep.verdict == "DEFICIENT by 3"
    rep = observability_report(load_scenario(scenario_dir / "one_anchor.yaml"))
    assert rep.rank == rep.predicted_rank == rep.columns - 1
    rep = observability_report(load_scenario(scenario_dir / "three_dynamic.yaml"), at=10.0)
    assert (rep.rank, rep.columns) == (6, 9)
    with pytest.raises(InitializationError):
        observability_report(load_scenario(scenario_dir / "two_anchor.yaml"), at=1e6)


# ---- simulation -------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_zero_noise_run_is_exact(scenario_dir):
    res = run_scenario(load_scenario(scenario_dir / "zero_noise.yaml"))
    err = res.metrics.position_error
    settled = err[len(err) // 4:]
    assert settled.max() < 1e-6, settled.max()


def test_run_starts_after_initialization_phases(scenario_dir):
    s = load_scenario(scenario_dir / "two_anchor.yaml").with_overrides(durations={"static": 0.5, "linear": 5.0,
                                                                             "run": 3.0})
    res = run_scenario(s)
    assert res.times[0] == pytest.approx(5.5) and res.times[-1] == pytest.approx(8.5)
    assert res.vehicle_ids == (2, 3, 4)
    assert res.metrics.position_error[0].max() < 0.5
    assert res.metrics.baseline_position_error[0].max() < 1e-9  # dead reckoning starts on the true pose
    rep = res.init_report
    assert rep is not None and rep.summary_lines()


def test_truth_mode_without_static_vehicles(scenario_dir):
    s = load_scenario(scenario_dir / "three_dynamic.yaml")
    res = run_scenario(s.with_overrides(durations={**s.durations, "run": 5.0}))
    assert res.init_report is None and res.vehicle_ids == tuple(s.dynamic_ids)


def test_same_seed_same_bytes(tmp_path, short_uwb):
    for name in ("a", "b"):
        write_run(run_scenario(short_uwb, seed=11), tmp_path / name, figures=False)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "packet_log.csv" in files and "errors.csv" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    write_run(run_scenario(short_uwb, seed=12), tmp_path / "c", figures=False)
    assert (tmp_path / "c" / "errors.csv").read_bytes() != (tmp_path / "a" / "errors.csv").read_bytes()


def test_replay_reproduces_live_run(tmp_path, short_uwb):
    live = run_scenario(short_uwb)
    write_run(live, tmp_path, figures=False)
    again = replay_scenario(short_uwb, read_packet_log(tmp_path / "packet_log.csv"))
    assert np.array_equal(live.estimate, again.estimate)


def test_monte_carlo_rows(scenario_dir):
    s = load_scenario(scenario_dir / "two_anchor.yaml")
    s = s.with_overrides(durations={**s.durations, "run": 3.0})
    rows = monte_carlo(s, [1, 2])
    assert [r["seed"] for r in rows] == [1, 2] and all(r["status"] == "ok" for r in rows)
    assert rows == [] or len(rows[0]["thirds"]) == 3
    assert rows[0]["position_rmse"] != rows[1]["position_rmse"]


# ---- outputs and CLI --------------------------------------------------------------------------------------------

def test_output_files_and_columns(tmp_path, scenario_dir):
    s = load_scenario(scenario_dir / "two_anchor.yaml")
    res = run_scenario(s.with_overrides(durations={**s.durations, "run": 2.0}))
    paths = write_run(res, tmp_path, figures=True)
    names = {p.name for p in paths}
    assert {"trajectory_2.csv", "errors.csv", "summary.csv", "plot.gp"} <= names
    assert any(n.endswith(".png") for n in names)
    with open(tmp_path / "trajectory_3.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:7] == ["t", "x_true", "y_true", "theta_true", "x_est", "y_est", "theta_est"]
    assert len(rows) == 1 + len(res.times)
    with open(tmp_path / "summary.csv") as fh:
        assert next(csv.reader(fh)) == SUMMARY_COLUMNS


def test_cli_simulate_and_observability(tmp_path, scenario_dir, base_dict, capsys):
    d = variant(base_dict)
    d["durations"]["run"] = 2.0
    path = tmp_path / "short.yaml"
    path.write_text(yaml.safe_dump(d))
    assert main(["simulate", str(path), "--out", str(tmp_path / "o"), "--no-figures"]) == 0
    assert (tmp_path / "o" / "errors.csv").exists()
    assert main(["simulate", str(path), "--runs", "2", "--workers", "1", "--out", str(tmp_path / "mc"),
                 "--no-figures"]) == 0
    with open(tmp_path / "mc" / "montecarlo.csv") as fh:
        assert next(csv.reader(fh)) == MC_COLUMNS
    assert main(["observability", str(scenario_dir / "single_anchor_pair.yaml")]) == 0
    assert main(["observability", str(scenario_dir / "two_anchor.yaml")]) == 0
    out = capsys.readouterr().out
    assert "measured rank: 9 of 9" in out and "verdict: FULL" in out


def test_cli_replay_and_init_demo(tmp_path, scenario_dir, capsys):
    d = yaml.safe_load((scenario_dir / "two_anchor_uwb.yaml").read_text())
    d["durations"]["run"] = 1.0
    path = tmp_path / "uwb.yaml"
    path.write_text(yaml.safe_dump(d))
    assert main(["simulate", str(path), "--out", str(tmp_path / "live"), "--no-figures"]) == 0
    assert main(["replay", str(tmp_path / "live" / "packet_log.csv"), str(path), "--out", str(tmp_path / "rep"),
                 "--no-figures"]) == 0
    assert (tmp_path / "rep" / "errors.csv").read_bytes() == (tmp_path / "live" / "errors.csv").read_bytes()
    assert main(["init-demo", str(path)]) == 0
    assert capsys.readouterr().out


def test_cli_exit_codes(tmp_path, base_dict):
    assert main(["simulate", str(tmp_path / "missing.yaml")]) == EXIT_SCENARIO
    bad = variant(base_dict)
    bad["vehicles"] = bad["vehicles"][:2]
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(bad))
    assert main(["simulate", str(tmp_path / "bad.yaml")]) == EXIT_SCENARIO
    dead = variant(base_dict, network={"mode": "uwb", "drop_probability": 1.0})
    dead["durations"]["run"] = 1.0
    (tmp_path / "dead.yaml").write_text(yaml.safe_dump(dead))
    assert main(["init-demo", str(tmp_path / "dead.yaml")]) == EXIT_INIT
    assert main(["simulate", str(tmp_path / "dead.yaml"), "--out", str(tmp_path / "x")]) == EXIT_INIT
    truth_only = variant(base_dict, init={"mode": "truth"})
    (tmp_path / "t.yaml").write_text(yaml.safe_dump(truth_only))
    assert main(["init-demo", str(tmp_path / "t.yaml")]) == EXIT_INIT


@pytest.mark.slow
def test_simulated_initialization_accuracy(scenario_dir):
    from rangeloc.simulation import AnchorFrame, build_truth, run_initialization, spawn_streams
    s = load_scenario(scenario_dir / "two_anchor.yaml")
    sq = []
    for seed in range(100):
        ss = s.with_overrides(seed=seed)
        rep = run_initialization(ss)
        truth = build_truth(ss, spawn_streams(seed)["trajectory"])
        frame = AnchorFrame.from_truth(ss, truth).apply(truth.poses)[0]
        sq += [float(np.sum((rep.positions[k] - frame[k, :2]) ** 2)) for k in range(len(s.ids))]
    assert math.sqrt(np.mean(sq)) < 0.3
