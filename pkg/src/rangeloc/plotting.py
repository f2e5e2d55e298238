"""Figures next to the CSV outputs.

A gnuplot script is always written so the CSVs can be re-plotted without
Python; PNGs are rendered with matplotlib's Agg backend, imported lazily so
the library itself does not need a display or the plotting stack.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

#: errors below this are drawn at this level on log axes
DISPLAY_FLOOR = 1e-4

GNUPLOT_TEMPLATE = """\
# Re-plot the CSV outputs of one run:  gnuplot plot.gp
set datafile separator ","
set terminal pngcairo size 900,700
set key outside right
set output "trajectories_gp.png"
set size ratio -1
set xlabel "x [m]"
set ylabel "y [m]"
plot {traj}
set output "errors_gp.png"
set size noratio
set xlabel "t [s]"
set ylabel "position error [m]"
set logscale y
plot {err}
"""


def write_gnuplot_script(out_dir, vehicle_ids) -> Path:
    traj, err = [], []
    for k, vid in enumerate(vehicle_ids):
        f = f"trajectory_{vid}.csv"
        traj.append(f'"{f}" using 2:3 skip 1 with lines lc {k + 1} dt 1 title "truth {vid}"')
        traj.append(f'"{f}" using 5:6 skip 1 with lines lc {k + 1} dt 2 title "filter {vid}"')
        err.append(f'"errors.csv" using 1:{2 + 2 * k} skip 1 with lines lc {k + 1} title "filter {vid}"')
        err.append(f'"errors.csv" using 1:{2 + 2 * len(vehicle_ids) + 2 * k} skip 1 with lines lc {k + 1} dt 3 '
                   f'title "odometry {vid}"')
    path = Path(out_dir) / "plot.gp"
    path.write_text(GNUPLOT_TEMPLATE.format(traj=", \\\n     ".join(traj), err=", \\\n     ".join(err)))
    return path


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_run_figures(result, out_dir) -> list:
    """Trajectory and error figures for one run; returns the written paths."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    paths = []
    ids = result.vehicle_ids
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]

    fig, ax = plt.subplots(figsize=(7, 7))
    for k, vid in enumerate(ids):
        c = colors[k % len(colors)]
        ax.plot(result.truth[:, k, 0], result.truth[:, k, 1], color=c, lw=1.2, label=f"truth {vid}")
        ax.plot(result.estimate[:, k, 0], result.estimate[:, k, 1], color=c, lw=0.8, ls="--", label=f"filter {vid}")
        ax.plot(result.baseline[:, k, 0], result.baseline[:, k, 1], color=c, lw=0.6, ls=":", alpha=0.7)
    anchors = result.init_report.anchor_positions if result.init_report is not None else {}
    for vid, p in sorted(anchors.items()):
        ax.plot(p[0], p[1], "k^", ms=8)
        ax.annotate(str(vid), (p[0], p[1]), textcoords="offset points", xytext=(4, 4))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{result.scenario.name}: trajectories (dotted: odometry only)")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    paths.append(out_dir / "trajectories.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)

    m = result.metrics
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for k, vid in enumerate(ids):
        c = colors[k % len(colors)]
        a1.semilogy(m.times, np.maximum(m.position_error[:, k], DISPLAY_FLOOR), color=c, lw=0.9, label=f"filter {vid}")
        if m.baseline_position_error is not None:
            a1.semilogy(m.times, np.maximum(m.baseline_position_error[:, k], DISPLAY_FLOOR), color=c, lw=0.7, ls=":",
                        label=f"odometry {vid}")
        a2.plot(m.times, m.heading_error[:, k], color=c, lw=0.8)
    a1.set_ylabel("position error [m]")
    a1.legend(fontsize=7, ncol=2)
    a2.set_ylabel("heading error [rad]")
    a2.set_xlabel("t [s]")
    fig.tight_layout()
    paths.append(out_dir / "errors.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)
    return paths


def render_ensemble_figure(times, mean_err, mean_baseline, out_path, title="") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.semilogy(times, np.maximum(mean_err, DISPLAY_FLOOR), label="filter")
    ax.semilogy(times, np.maximum(mean_baseline, DISPLAY_FLOOR), ls=":", label="odometry only")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("mean position error [m]")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)
