"""Centralized error-state Kalman filter over the dynamic vehicles.

The nominal state holds one ``(x, y, theta)`` row per dynamic vehicle and is
propagated with the midpoint rule on encoder samples. The error-state
covariance is propagated with the per-vehicle Jacobians and corrected with
inter-vehicle ranges (dynamic-dynamic and dynamic-anchor). Static vehicles are
not part of the state; their positions are constants.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateConfiguration, InvalidArgument, StaleInput
from .kinematics import MotionMeasurement, NoiseSpec, RangeMeasurement, VehicleState, wrap_angle

logger = logging.getLogger(__name__)

DEGENERATE_DISTANCE = 1e-9


@dataclass
class FleetBelief:
    dynamic_ids: tuple
    poses: np.ndarray
    covariance: np.ndarray
    static_anchors: dict = field(default_factory=dict)
    last_update_time: float = 0.0
    gated: int = 0
    used: int = 0
    skipped_updates: int = 0

    def __post_init__(self):
        self.dynamic_ids = tuple(self.dynamic_ids)
        self.poses = np.array(self.poses, dtype=float).reshape(len(self.dynamic_ids), 3)
        n = 3 * len(self.dynamic_ids)
        self.covariance = np.array(self.covariance, dtype=float).reshape(n, n)
        self.static_anchors = {k: np.asarray(v, dtype=float) for k, v in self.static_anchors.items()}

    @classmethod
    def from_states(cls, states: dict, covariances: dict, static_anchors=None, time: float = 0.0):
        ids = tuple(sorted(states))
        poses = np.array([states[k].as_array() for k in ids])
        P = np.zeros((3 * len(ids), 3 * len(ids)))
        for c, k in enumerate(ids):
            P[3 * c:3 * c + 3, 3 * c:3 * c + 3] = covariances[k]
        return cls(ids, poses, P, static_anchors or {}, time)

    @property
    def n(self) -> int:
        return len(self.dynamic_ids)

    @property
    def nominal(self) -> list[VehicleState]:
        return [VehicleState.from_array(p) for p in self.poses]

    def index(self, vehicle_id: int) -> int:
        return self.dynamic_ids.index(vehicle_id)

    def block(self, vehicle_id: int) -> np.ndarray:
        c = 3 * self.index(vehicle_id)
        return self.covariance[c:c + 3, c:c + 3]

    def copy(self) -> "FleetBelief":
        return FleetBelief(self.dynamic_ids, self.poses.copy(), self.covariance.copy(), dict(self.static_anchors),
                           self.last_update_time, self.gated, self.used, self.skipped_updates)


@dataclass
class ProcessNoiseSpec:
    noise: NoiseSpec
    dt: float

    def __post_init__(self):
        if not self.dt > 0.0:
            raise InvalidArgument("dt must be positive")


def process_jacobian(theta_mid: float, v: float, dt: float) -> np.ndarray:
    """F_x block of one vehicle, evaluated at the interval-midpoint heading and mean speed."""
    return np.array([
        [1.0, 0.0, -math.sin(theta_mid) * v * dt],
        [0.0, 1.0, math.cos(theta_mid) * v * dt],
        [0.0, 0.0, 1.0],
    ])


def process_noise(theta: float, sigma_v: float, sigma_omega: float, dt: float) -> np.ndarray:
    # diagonal form with heading-dependent position terms; no cos*sin cross term
    return np.diag([
        (math.cos(theta) * sigma_v * dt) ** 2,
        (math.sin(theta) * sigma_v * dt) ** 2,
        (sigma_omega * dt) ** 2,
    ])


def _propagate_arrays(poses, P, v0, w0, v1, w1, dt, sigma_v, sigma_w, q_scale=None):
    v = 0.5 * (v0 + v1)
    w = 0.5 * (w0 + w1)
    mid = poses[:, 2] + 0.5 * w * dt
    c, s = np.cos(mid), np.sin(mid)
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + v * dt * c
    out[:, 1] = poses[:, 1] + v * dt * s
    out[:, 2] = wrap_angle(poses[:, 2] + w * dt)
    n = poses.shape[0]
    F = np.eye(3 * n)
    F[0::3, 2::3][np.diag_indices(n)] = -s * v * dt
    F[1::3, 2::3][np.diag_indices(n)] = c * v * dt
    q = np.empty((n, 3))
    q[:, 0] = (c * sigma_v * dt) ** 2
    q[:, 1] = (s * sigma_v * dt) ** 2
    q[:, 2] = (sigma_w * dt) ** 2
    if q_scale is not None:
        q *= np.asarray(q_scale, dtype=float)[:, None]
    P = F @ P @ F.T
    P.flat[::3 * n + 1] += q.ravel()
    return out, 0.5 * (P + P.T)


def propagate(belief: FleetBelief, motions: dict, dt: float | None = None,
              noise: NoiseSpec | dict | None = None, q_scale: dict | None = None) -> FleetBelief:
    """Propagate nominal states and error covariance over one motion interval.

    Parameters
    ----------
    belief : FleetBelief
    motions : dict
        ``vehicle_id -> (u_k, u_k1)`` pair of :class:`MotionMeasurement` for
        every dynamic vehicle.
    dt : float, optional
        Interval length; defaults to the sample spacing of the pairs.
    noise : NoiseSpec or dict of NoiseSpec
        Encoder noise, shared or per vehicle.
    q_scale : dict, optional
        Per-vehicle multiplier on the process noise (used for held inputs).
    """
    ids = belief.dynamic_ids
    missing = [k for k in ids if k not in motions]
    if missing:
        raise StaleInput(f"no motion input for vehicles {missing}")
    u0 = [motions[k][0] for k in ids]
    u1 = [motions[k][1] for k in ids]
    if dt is None:
        dts = {round(b.timestamp - a.timestamp, 12) for a, b in zip(u0, u1)}
        if len(dts) != 1:
            raise InvalidArgument("motion pairs span different intervals")
        dt = dts.pop()
    if not dt > 0.0:
        raise InvalidArgument(f"non-positive dt {dt}")
    noise = noise if noise is not None else NoiseSpec()
    if isinstance(noise, NoiseSpec):
        sv = np.full(len(ids), noise.sigma_v)
        sw = np.full(len(ids), noise.sigma_omega)
    else:
        sv = np.array([noise[k].sigma_v for k in ids])
        sw = np.array([noise[k].sigma_omega for k in ids])
    qs = None if q_scale is None else np.array([q_scale.get(k, 1.0) for k in ids])
    poses, P = _propagate_arrays(
        belief.poses, belief.covariance,
        np.array([u.linear_velocity for u in u0]), np.array([u.turn_rate for u in u0]),
        np.array([u.linear_velocity for u in u1]), np.array([u.turn_rate for u in u1]),
        dt, sv, sw, qs,
    )
    out = belief.copy()
    out.poses, out.covariance = poses, P
    out.last_update_time = belief.last_update_time + dt
    return out


@dataclass
class SmoothingQueue:
    id_a: int
    id_b: int
    window: int = 5
    weights: str = "exponential"
    decay: float = 0.5
    buffer: deque = field(default=None, repr=False)

    def __post_init__(self):
        if self.window < 1:
            raise InvalidArgument("window must hold at least one sample")
        if self.weights not in ("exponential", "uniform"):
            raise InvalidArgument(f"unknown weighting {self.weights!r}")
        if not 0.0 < self.decay <= 1.0:
            raise InvalidArgument("decay must lie in (0, 1]")
        self.buffer = deque(maxlen=self.window)

    @property
    def pair(self):
        return (min(self.id_a, self.id_b), max(self.id_a, self.id_b))

    def weight_vector(self, count: int) -> np.ndarray:
        """Normalized weights for ``count`` samples, oldest first."""
        ages = np.arange(count - 1, -1, -1, dtype=float)
        w = np.ones(count) if self.weights == "uniform" else self.decay ** ages
        return w / w.sum()


def smooth_range(queue: SmoothingQueue, incoming: RangeMeasurement) -> RangeMeasurement:
    """Push a sample and return the weighted window average, stamped at the newest sample."""
    if incoming.pair != queue.pair:
        raise InvalidArgument(f"measurement pair {incoming.pair} does not match queue {queue.pair}")
    queue.buffer.append(incoming)
    values = np.array([m.distance for m in queue.buffer])
    value = float(values @ queue.weight_vector(len(values)))
    return RangeMeasurement(incoming.id_a, incoming.id_b, value, incoming.timestamp)


class RangeSmootherBank:
    """Array form of one :class:`SmoothingQueue` per pair, for the simulation hot path."""

    def __init__(self, n_pairs: int, window: int = 5, weights: str = "exponential", decay: float = 0.5):
        proto = SmoothingQueue(0, 1, window, weights, decay)
        self.window = window
        self.buf = np.zeros((window, n_pairs))
        self.ptr = np.zeros(n_pairs, dtype=int)
        self.count = np.zeros(n_pairs, dtype=int)
        self.last_time = np.full(n_pairs, -np.inf)
        self._weights = [None] + [proto.weight_vector(c) for c in range(1, window + 1)]
        self._cols = np.arange(n_pairs)
        # while every push carried all pairs, the rings share one write pointer
        self._aligned = True

    def push(self, t: float, values: np.ndarray):
        ok = np.isfinite(values)
        if self._aligned and ok.all():
            head = self.ptr[0]
            self.buf[head] = values
            self.ptr[:] = (head + 1) % self.window
            if self.count[0] < self.window:
                self.count += 1
            self.last_time[:] = t
            return
        if not ok.any():
            return
        self._aligned = False
        cols = self._cols[ok]
        self.buf[self.ptr[ok], cols] = values[ok]
        self.ptr[ok] = (self.ptr[ok] + 1) % self.window
        self.count[ok] = np.minimum(self.count[ok] + 1, self.window)
        self.last_time[ok] = t

    def smoothed(self) -> np.ndarray:
        W = self.window
        if self._aligned:
            c = int(self.count[0])
            if c == 0:
                return np.full(self.buf.shape[1], np.nan)
            slots = (self.ptr[0] - c + np.arange(c)) % W
            return self._weights[c] @ self.buf[slots]
        out = np.full(self.buf.shape[1], np.nan)
        for c in range(1, W + 1):
            sel = np.nonzero(self.count == c)[0]
            if not sel.size:
                continue
            # slots ordered oldest -> newest
            slots = (self.ptr[sel][None, :] - c + np.arange(c)[:, None]) % W
            out[sel] = self._weights[c] @ self.buf[slots, sel[None, :]]
        return out


def range_jacobian_row(belief: FleetBelief, id_a: int, id_b: int) -> np.ndarray:
    """Row of H for the range between ``id_a`` and ``id_b`` (length 3n)."""
    row = np.zeros(3 * belief.n)
    dyn = set(belief.dynamic_ids)
    if id_a not in dyn and id_b not in dyn:
        raise InvalidArgument("range between two static vehicles carries no state information")
    if id_a in dyn and id_b in dyn:
        i, j = sorted((belief.index(id_a), belief.index(id_b)))
        diff = belief.poses[i, :2] - belief.poses[j, :2]
        dist = float(np.hypot(*diff))
        if dist <= DEGENERATE_DISTANCE:
            raise DegenerateConfiguration("coincident vehicles")
        e = diff / dist
        row[3 * i:3 * i + 2] = e
        row[3 * j:3 * j + 2] = -e
        return row
    dyn_id, static_id = (id_a, id_b) if id_a in dyn else (id_b, id_a)
    if static_id not in belief.static_anchors:
        raise InvalidArgument(f"vehicle {static_id} is neither dynamic nor a known anchor")
    i = belief.index(dyn_id)
    diff = belief.poses[i, :2] - belief.static_anchors[static_id]
    dist = float(np.hypot(*diff))
    if dist <= DEGENERATE_DISTANCE:
        raise DegenerateConfiguration("vehicle coincides with anchor")
    row[3 * i:3 * i + 2] = diff / dist
    return row


def predicted_range(belief: FleetBelief, id_a: int, id_b: int) -> float:
    def pos(k):
        if k in belief.static_anchors and k not in belief.dynamic_ids:
            return belief.static_anchors[k]
        return belief.poses[belief.index(k), :2]
    return float(np.hypot(*(pos(id_a) - pos(id_b))))


def _update_arrays(poses, P, H, r, sigma_range, gate):
    """Gated Joseph-form update on stacked rows. Returns (poses, P, n_used, n_gated, ok)."""
    R = max(sigma_range, 0.0) ** 2
    HP = H @ P
    s_diag = np.einsum("ij,ij->i", HP, H) + R
    keep = np.abs(r) <= gate * np.sqrt(np.maximum(s_diag, 0.0))
    n_gated = int(np.sum(~keep))
    if not keep.all():
        H, HP, r = H[keep], HP[keep], r[keep]
    m = len(r)
    if m == 0:
        return poses, P, 0, n_gated, True
    S = HP @ H.T
    S.flat[::m + 1] += R
    try:
        # Cholesky doubles as the positive-definiteness check of S
        np.linalg.cholesky(S)
        K = np.linalg.solve(S, HP).T
    except np.linalg.LinAlgError:
        logger.warning("singular innovation matrix; update skipped")
        return poses, P, 0, n_gated, False
    dx = K @ r
    out = poses + dx.reshape(-1, 3)
    out[:, 2] = wrap_angle(out[:, 2])
    A = -K @ H
    A.flat[::A.shape[0] + 1] += 1.0
    P = A @ P @ A.T + R * (K @ K.T)
    return out, 0.5 * (P + P.T), m, n_gated, True


def update(belief: FleetBelief, ranges: Sequence[RangeMeasurement], sigma_range: float,
           gate: float = 6.0) -> FleetBelief:
    """ESKF measurement update with stacked range rows.

    Rows whose innovation exceeds ``gate`` standard deviations of their own
    innovation variance are dropped and counted in ``belief.gated``. A
    degenerate measurement (coincident vehicles) is dropped silently. The
    error estimate is injected additively and the covariance reset by the
    Joseph form.
    """
    rows, res = [], []
    for m in ranges:
        try:
            h = range_jacobian_row(belief, m.id_a, m.id_b)
        except (DegenerateConfiguration, InvalidArgument):
            continue
        rows.append(h)
        res.append(m.distance - predicted_range(belief, m.id_a, m.id_b))
    out = belief.copy()
    if not rows:
        return out
    poses, P, used, gated, ok = _update_arrays(belief.poses, belief.covariance, np.array(rows), np.array(res),
                                               sigma_range, gate)
    out.poses, out.covariance = poses, P
    out.used += used
    out.gated += gated
    out.skipped_updates += 0 if ok else 1
    return out


@dataclass
class EstimatorConfig:
    smoothing_window: int = 5
    smoothing_weights: str = "exponential"
    smoothing_decay: float = 0.5
    gate_sigma: float = 6.0
    max_hold_ticks: int = 3
    stale_q_inflation: float = 10.0


class CollaborativeEstimator:
    """Propagate-then-update driver at the motion rate.

    Parameters
    ----------
    belief : FleetBelief
        Initial belief; its ``static_anchors`` are the anchors the filter uses.
    vehicle_ids : sequence of int
        Every vehicle that may appear in range measurements. Pairs are indexed
        in ``itertools.combinations`` order over the sorted ids.
    noise : NoiseSpec
    initial_motion : array (n, 2)
        Last ``(v, omega)`` sample of each dynamic vehicle at the belief time.
    """

    def __init__(self, belief: FleetBelief, vehicle_ids, noise: NoiseSpec, initial_motion=None,
                 config: EstimatorConfig | None = None):
        self.belief = belief.copy()
        self.noise = noise
        self.config = config or EstimatorConfig()
        self.vehicle_ids = tuple(sorted(vehicle_ids))
        self.pairs = [(a, b) for k, a in enumerate(self.vehicle_ids) for b in self.vehicle_ids[k + 1:]]
        n = belief.n
        self.last_motion = np.zeros((n, 2)) if initial_motion is None else np.array(initial_motion, dtype=float)
        self.hold = np.zeros(n, dtype=int)
        self.bank = RangeSmootherBank(len(self.pairs), self.config.smoothing_window,
                                      self.config.smoothing_weights, self.config.smoothing_decay)
        dyn = {k: i for i, k in enumerate(belief.dynamic_ids)}
        dd, da = [], []
        for p, (a, b) in enumerate(self.pairs):
            if a in dyn and b in dyn:
                dd.append((p, dyn[a], dyn[b]))
            elif a in dyn and b in belief.static_anchors:
                da.append((p, dyn[a], belief.static_anchors[b]))
            elif b in dyn and a in belief.static_anchors:
                da.append((p, dyn[b], belief.static_anchors[a]))
        rows = [(p, i, j, 0.0, 0.0) for p, i, j in dd] + [(p, i, -1, a[0], a[1]) for p, i, a in da]
        rows.sort()
        self._row_pair = np.array([r[0] for r in rows], dtype=int)
        self._row_i = np.array([r[1] for r in rows], dtype=int)
        self._row_j = np.array([r[2] for r in rows], dtype=int)
        self._row_anchor = np.array([r[3:] for r in rows], dtype=float).reshape(-1, 2)

    def pair_index(self, a: int, b: int) -> int:
        return self.pairs.index((min(a, b), max(a, b)))

    def push_ranges(self, t: float, values: np.ndarray):
        """Queue one range frame; ``values`` follows :attr:`pairs`, NaN where absent."""
        self.bank.push(t, np.asarray(values, dtype=float))

    def push_range(self, m: RangeMeasurement):
        values = np.full(len(self.pairs), np.nan)
        values[self.pair_index(m.id_a, m.id_b)] = m.distance
        self.bank.push(m.timestamp, values)

    def _rows(self, fresh):
        """Stacked H rows and innovations for the pairs with fresh smoothed ranges."""
        keep = fresh[self._row_pair]
        if not keep.any():
            return None, None
        pair, i, j = self._row_pair[keep], self._row_i[keep], self._row_j[keep]
        p = self.belief.poses
        other = np.where((j >= 0)[:, None], p[np.maximum(j, 0), :2], self._row_anchor[keep])
        diff = p[i, :2] - other
        dist = np.hypot(diff[:, 0], diff[:, 1])
        ok = dist > DEGENERATE_DISTANCE
        if not ok.all():
            pair, i, j, diff, dist = pair[ok], i[ok], j[ok], diff[ok], dist[ok]
        if not len(pair):
            return None, None
        e = diff / dist[:, None]
        rows = np.arange(len(pair))
        H = np.zeros((len(pair), 3 * self.belief.n))
        H[rows, 3 * i] = e[:, 0]
        H[rows, 3 * i + 1] = e[:, 1]
        dyn = j >= 0
        H[rows[dyn], 3 * j[dyn]] = -e[dyn, 0]
        H[rows[dyn], 3 * j[dyn] + 1] = -e[dyn, 1]
        return H, self.bank.smoothed()[pair] - dist

    def step(self, t: float, motion=None) -> FleetBelief:
        """Advance the filter to time ``t``.

        ``motion`` is an ``(n, 2)`` array of new ``(v, omega)`` samples in
        :attr:`belief.dynamic_ids` order (NaN rows = sample missing) or a dict
        ``vehicle_id -> MotionMeasurement``. Ranges queued since the previous
        step are smoothed and used for the update.
        """
        b = self.belief
        dt = t - b.last_update_time
        if not dt > 0.0:
            raise InvalidArgument(f"out-of-order step: t={t} after {b.last_update_time}")
        new = np.full((b.n, 2), np.nan)
        if isinstance(motion, dict):
            for k, m in motion.items():
                if k in b.dynamic_ids:
                    new[b.index(k)] = (m.linear_velocity, m.turn_rate)
        elif motion is not None:
            new = np.array(motion, dtype=float).reshape(b.n, 2)
        missing = ~np.all(np.isfinite(new), axis=1)
        self.hold = np.where(missing, self.hold + 1, 0)
        new[missing] = self.last_motion[missing]
        q_scale = None
        if np.any(self.hold > self.config.max_hold_ticks):
            q_scale = np.where(self.hold > self.config.max_hold_ticks, self.config.stale_q_inflation, 1.0)
        sv = np.full(b.n, self.noise.sigma_v)
        sw = np.full(b.n, self.noise.sigma_omega)
        poses, P = _propagate_arrays(b.poses, b.covariance, self.last_motion[:, 0], self.last_motion[:, 1],
                                     new[:, 0], new[:, 1], dt, sv, sw, q_scale)
        self.last_motion = new
        b.poses, b.covariance = poses, P
        fresh = self.bank.last_time > b.last_update_time + 1e-12
        b.last_update_time = t
        if fresh.any():
            H, r = self._rows(fresh)
            if H is not None:
                poses, P, used, gated, ok = _update_arrays(b.poses, b.covariance, H, r, self.noise.sigma_range,
                                                           self.config.gate_sigma)
                b.poses, b.covariance = poses, P
                b.used += used
                b.gated += gated
                b.skipped_updates += 0 if ok else 1
        return b

    def snapshot(self) -> dict:
        b = self.belief
        return {
            "time": b.last_update_time,
            "poses": {k: b.poses[i].copy() for i, k in enumerate(b.dynamic_ids)},
            "covariances": {k: b.block(k).copy() for k in b.dynamic_ids},
            "gated": b.gated,
            "used": b.used,
        }


def dead_reckon(pose0, v, omega, dt: float) -> np.ndarray:
    """Midpoint integration of a sampled ``(v, omega)`` stream; returns ``(len(v), 3)`` poses."""
    out = np.empty((len(v), 3))
    x, y, th = (float(c) for c in pose0)
    out[0] = (x, y, th)
    for k in range(1, len(v)):
        vm = 0.5 * (v[k - 1] + v[k])
        wm = 0.5 * (omega[k - 1] + omega[k])
        mid = th + 0.5 * wm * dt
        x += vm * dt * math.cos(mid)
        y += vm * dt * math.sin(mid)
        th += wm * dt
        out[k] = (x, y, th)
    out[:, 2] = wrap_angle(out[:, 2])
    return out
