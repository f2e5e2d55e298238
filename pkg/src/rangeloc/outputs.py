"""CSV writers for runs and Monte Carlo batches."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .uwb_net import write_packet_log


def _f(x) -> str:
    return format(float(x), ".10g")


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_trajectories(result, out_dir) -> list:
    paths = []
    for k, vid in enumerate(result.vehicle_ids):
        path = Path(out_dir) / f"trajectory_{vid}.csv"
        fh, w = _writer(path)
        with fh:
            w.writerow(["t", "x_true", "y_true", "theta_true", "x_est", "y_est", "theta_est",
                        "x_odo", "y_odo", "theta_odo"])
            for j, t in enumerate(result.times):
                w.writerow([_f(t)] + [_f(v) for v in result.truth[j, k]] + [_f(v) for v in result.estimate[j, k]]
                           + [_f(v) for v in result.baseline[j, k]])
        paths.append(path)
    return paths


def write_errors(result, out_dir) -> Path:
    m = result.metrics
    path = Path(out_dir) / "errors.csv"
    header = ["t"]
    for vid in m.vehicle_ids:
        header += [f"pos_err_{vid}", f"head_err_{vid}"]
    for vid in m.vehicle_ids:
        header += [f"odo_pos_err_{vid}", f"odo_head_err_{vid}"]
    fh, w = _writer(path)
    with fh:
        w.writerow(header)
        for j, t in enumerate(m.times):
            row = [_f(t)]
            for k in range(len(m.vehicle_ids)):
                row += [_f(m.position_error[j, k]), _f(m.heading_error[j, k])]
            for k in range(len(m.vehicle_ids)):
                row += [_f(m.baseline_position_error[j, k]), _f(m.baseline_heading_error[j, k])]
            w.writerow(row)
    return path


SUMMARY_COLUMNS = ["vehicle", "position_rmse", "heading_rmse", "odo_position_rmse", "odo_heading_rmse",
                   "final_position_error", "odo_final_position_error", "gated", "used"]


def summary_rows(m) -> list:
    rows = []
    for k, vid in enumerate(m.vehicle_ids):
        rows.append([vid, _f(m.position_rmse[vid]), _f(m.heading_rmse[vid]), _f(m.baseline_position_rmse[vid]),
                     _f(m.baseline_heading_rmse[vid]), _f(m.position_error[-1, k]),
                     _f(m.baseline_position_error[-1, k]), "", ""])
    rows.append(["fleet", _f(m.fleet_position_rmse()), _f(m.fleet_heading_rmse()),
                 _f(np.sqrt(np.mean(m.baseline_position_error ** 2))),
                 _f(np.sqrt(np.mean(m.baseline_heading_error ** 2))), _f(m.final_error()),
                 _f(m.final_error(baseline=True)), m.gated, m.used])
    return rows


def write_summary(result, out_dir) -> Path:
    path = Path(out_dir) / "summary.csv"
    fh, w = _writer(path)
    with fh:
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(summary_rows(result.metrics))
    return path


def write_run(result, out_dir, figures: bool = True) -> list:
    """Write every per-run artifact into ``out_dir``; returns the paths."""
    from .plotting import render_run_figures, write_gnuplot_script

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = write_trajectories(result, out_dir)
    paths += [write_errors(result, out_dir), write_summary(result, out_dir)]
    if result.packets is not None:
        write_packet_log(out_dir / "packet_log.csv", result.packets)
        paths.append(out_dir / "packet_log.csv")
    paths.append(write_gnuplot_script(out_dir, result.vehicle_ids))
    if figures:
        paths += render_run_figures(result, out_dir)
    return paths


MC_COLUMNS = ["run", "seed", "status", "position_rmse", "heading_rmse", "odo_position_rmse", "final_error",
              "odo_final_error", "rmse_middle20", "rmse_last20", "gated"]


def write_montecarlo(rows, out_dir) -> Path:
    path = Path(out_dir) / "montecarlo.csv"
    fh, w = _writer(path)
    with fh:
        w.writerow(MC_COLUMNS)
        for r in rows:
            w.writerow([r.get(c, "") if not isinstance(r.get(c), float) else _f(r[c]) for c in MC_COLUMNS])
    return path
