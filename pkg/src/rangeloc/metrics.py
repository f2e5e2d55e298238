"""Error time series and RMSE summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .kinematics import wrap_angle


def _rmse(a, axis=None):
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a ** 2))) if axis is None else np.sqrt(np.mean(a ** 2, axis=axis))


@dataclass
class RunMetrics:
    """Per-vehicle errors over the run phase.

    ``position_error`` and ``heading_error`` are ``(T, n)`` arrays matching
    ``times`` and ``vehicle_ids``; the ``baseline_*`` arrays hold the same for
    dead reckoning when available.
    """

    times: np.ndarray
    vehicle_ids: tuple
    position_error: np.ndarray
    heading_error: np.ndarray
    baseline_position_error: np.ndarray | None = None
    baseline_heading_error: np.ndarray | None = None
    gated: int = 0
    used: int = 0
    init_report: object = field(default=None, repr=False)
    moving_ids: tuple = ()

    def columns(self, vehicles):
        if vehicles is None:
            return slice(None)
        return [self.vehicle_ids.index(v) for v in vehicles]

    @property
    def position_rmse(self) -> dict:
        return dict(zip(self.vehicle_ids, _rmse(self.position_error, axis=0).tolist()))

    @property
    def heading_rmse(self) -> dict:
        return dict(zip(self.vehicle_ids, _rmse(self.heading_error, axis=0).tolist()))

    @property
    def baseline_position_rmse(self) -> dict:
        if self.baseline_position_error is None:
            return {}
        return dict(zip(self.vehicle_ids, _rmse(self.baseline_position_error, axis=0).tolist()))

    @property
    def baseline_heading_rmse(self) -> dict:
        if self.baseline_heading_error is None:
            return {}
        return dict(zip(self.vehicle_ids, _rmse(self.baseline_heading_error, axis=0).tolist()))

    def fleet_position_rmse(self, vehicles=None) -> float:
        return _rmse(self.position_error[:, self.columns(vehicles)])

    def fleet_heading_rmse(self, vehicles=None) -> float:
        return _rmse(self.heading_error[:, self.columns(vehicles)])

    def window_rmse(self, start: float, stop: float, vehicles=None, baseline: bool = False) -> float:
        """Position RMSE over the fraction ``[start, stop)`` of the run."""
        err = self.baseline_position_error if baseline else self.position_error
        T = len(self.times)
        a, b = int(round(start * T)), int(round(stop * T))
        if b <= a:
            raise InvalidArgument("empty window")
        return _rmse(err[a:b, self.columns(vehicles)])

    def final_error(self, vehicles=None, baseline: bool = False) -> float:
        """Mean position error over the selected vehicles at the last step."""
        err = self.baseline_position_error if baseline else self.position_error
        return float(np.mean(err[-1, self.columns(vehicles)]))


def compute_metrics(times, estimate, truth, vehicle_ids, baseline=None, **extra) -> RunMetrics:
    """Errors between matched estimate and truth series.

    Parameters
    ----------
    times : array (T,)
    estimate, truth : array (T, n, 3)
        Poses of the ``n`` vehicles in ``vehicle_ids`` order.
    baseline : array (T, n, 3), optional
        Dead-reckoning poses on the same grid.
    """
    times = np.asarray(times, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise InvalidArgument(f"estimate shape {estimate.shape} does not match truth shape {truth.shape}")
    if estimate.ndim != 3 or estimate.shape[2] != 3 or estimate.shape[0] != len(times):
        raise InvalidArgument("series must be (T, n, 3) with T matching the time vector")
    if estimate.shape[1] != len(vehicle_ids):
        raise InvalidArgument("vehicle id count does not match the series")

    def errs(est):
        pos = np.hypot(est[..., 0] - truth[..., 0], est[..., 1] - truth[..., 1])
        head = wrap_angle(est[..., 2] - truth[..., 2])
        return pos, head

    pos, head = errs(estimate)
    bpos = bhead = None
    if baseline is not None:
        baseline = np.asarray(baseline, dtype=float)
        if baseline.shape != truth.shape:
            raise InvalidArgument("baseline shape does not match truth")
        bpos, bhead = errs(baseline)
    return RunMetrics(times, tuple(vehicle_ids), pos, head, bpos, bhead, **extra)
