"""End-to-end scenario driver.

A run goes through three phases on the 100 Hz frame grid:

1. static ranging: every vehicle parked, pairwise ranges are averaged and the
   frame is established from the two static vehicles;
2. linear motion: dynamic vehicles drive straight and their headings are
   initialized from trilaterated tracks;
3. main run: the filter consumes motion samples and smoothed ranges.

Ranges come either straight from a noisy geometric model (``direct``) or
from the simulated UWB network (``uwb``); a recorded packet log can replace
the live network. Truth, encoder noise and range noise use separate random
streams spawned from the scenario seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterator

import numpy as np

from .errors import InitializationError, NotReady
from .estimator import CollaborativeEstimator, FleetBelief, dead_reckon
from .initializer import (AdjacencyMatrix, HeadingInitializer, InitReport, LinearMotionWindow, establish_frame,
                          resolve_y_sign)
from .kinematics import MotionMeasurement, VehicleState, wrap_angle
from .metrics import RunMetrics, compute_metrics
from .observability import RankReport, classify, fleet_matrix, numerical_rank
from .scenario import Scenario
from .trajectories import integrate_knots, run_inputs
from .uwb_net import (ChannelModel, ClockState, SPEED_OF_LIGHT, Sniffer, TdmaSchedule, UwbNetwork)

logger = logging.getLogger(__name__)

STREAMS = ("trajectory", "encoder", "range", "clock", "channel")
INIT_HEADING_STD = 0.05


def spawn_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


@dataclass
class Truth:
    """True poses on the frame grid and true inputs on the motion grid (world frame)."""

    ids: tuple
    frame_times: np.ndarray
    poses: np.ndarray
    knot_v: np.ndarray
    knot_w: np.ndarray

    def index(self, vid: int) -> int:
        return self.ids.index(vid)

    def positions_at(self, t: float, frame_rate: float) -> dict:
        x = t * frame_rate
        f = min(max(int(math.floor(x)), 0), len(self.frame_times) - 2)
        a = x - f
        p = (1 - a) * self.poses[f, :, :2] + a * self.poses[f + 1, :, :2]
        return {vid: p[k] for k, vid in enumerate(self.ids)}


def build_truth(s: Scenario, rng: np.random.Generator) -> Truth:
    ids = tuple(sorted(s.ids))
    stride = s.motion_stride
    k_static = s.frames("static") // stride
    k0 = k_static + s.frames("linear") // stride
    k_end = s.total_frames // stride
    dt = 1.0 / s.rates["motion"]
    substeps = s.rates["truth"] // s.rates["motion"]
    per_frame = s.rates["truth"] // s.rates["frame"]
    speed = float(s.init["linear_speed"])
    V = np.zeros((k_end + 1, len(ids)))
    W = np.zeros((k_end + 1, len(ids)))
    poses = np.empty((s.total_frames + 1, len(ids), 3))
    for c, vid in enumerate(ids):
        spec = s.vehicle(vid)
        if not spec.static and k0 > k_static:
            V[k_static + 1:k0 + 1, c] = speed
        head = integrate_knots(spec.pose, V[:k0 + 1, c], W[:k0 + 1, c], dt, substeps) if k0 > 0 \
            else np.array([spec.pose], dtype=float)
        if not spec.static:
            v, w = run_inputs(spec.trajectory, head[-1], (V[k0, c], W[k0, c]), k_end - k0, dt, s.arena, rng)
            V[k0 + 1:, c], W[k0 + 1:, c] = v, w
        tail = integrate_knots(head[-1], V[k0:, c], W[k0:, c], dt, substeps)
        full = np.concatenate([head, tail[1:]])
        poses[:, c] = full[::per_frame]
    times = np.arange(s.total_frames + 1) / s.rates["frame"]
    return Truth(ids, times, poses, V, W)


def encoder_stream(truth: Truth, s: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Noisy ``(v, omega)`` samples at every motion knot, shape ``(K + 1, N, 2)``."""
    n = rng.standard_normal((len(truth.knot_v), len(truth.ids), 2))
    return np.stack([truth.knot_v + s.noise.sigma_v * n[..., 0], truth.knot_w + s.noise.sigma_omega * n[..., 1]],
                    axis=-1)


@dataclass
class AnchorFrame:
    """Rigid map from world coordinates to the frame of the two static vehicles."""

    origin: np.ndarray
    angle: float

    @classmethod
    def from_truth(cls, s: Scenario, truth: Truth) -> "AnchorFrame":
        st = s.static_ids
        if len(st) < 2:
            return cls(np.zeros(2), 0.0)
        a1 = truth.poses[0, truth.index(st[0]), :2]
        a2 = truth.poses[0, truth.index(st[1]), :2]
        d = a2 - a1
        return cls(a1.copy(), math.atan2(d[1], d[0]))

    def apply(self, poses: np.ndarray) -> np.ndarray:
        c, s_ = math.cos(self.angle), math.sin(self.angle)
        out = np.empty_like(poses)
        dx = poses[..., 0] - self.origin[0]
        dy = poses[..., 1] - self.origin[1]
        out[..., 0] = c * dx + s_ * dy
        out[..., 1] = -s_ * dx + c * dy
        out[..., 2] = wrap_angle(poses[..., 2] - self.angle)
        return out


@dataclass
class FrameData:
    frame: int
    ranges: np.ndarray
    motion: np.ndarray | None


def pair_list(ids) -> list:
    return list(combinations(sorted(ids), 2))


def direct_frames(s: Scenario, truth: Truth, enc: np.ndarray, rng: np.random.Generator) -> Iterator[FrameData]:
    """Geometric ranges plus Gaussian noise for every pair in every frame."""
    pairs = pair_list(truth.ids)
    ia = np.array([truth.index(a) for a, _ in pairs])
    ib = np.array([truth.index(b) for _, b in pairs])
    p = truth.poses
    d = np.hypot(p[:, ia, 0] - p[:, ib, 0], p[:, ia, 1] - p[:, ib, 1])
    d = d + s.noise.sigma_range * rng.standard_normal(d.shape)
    d = np.maximum(d, 0.0)
    stride = s.motion_stride
    for f in range(len(d)):
        yield FrameData(f, d[f], enc[f // stride] if f % stride == 0 else None)


def build_network(s: Scenario, truth: Truth, enc: np.ndarray, streams: dict) -> UwbNetwork:
    net = s.network
    schedule = TdmaSchedule.for_vehicles(truth.ids, s.rates["frame"], s.tdma["slot_duration"])
    channel = channel_model(s)
    rc = streams["clock"]
    draws = rc.standard_normal((len(truth.ids), 2))
    clocks = {}
    for k, vid in enumerate(truth.ids):
        skew = float(np.clip(net["clock_skew_std"] * draws[k, 1], -5e-5, 5e-5))
        clocks[vid] = ClockState(net["clock_offset_std"] * draws[k, 0], skew, net["offset_density"],
                                 net["skew_density"])
    stride = s.motion_stride
    fr = s.rates["frame"]

    def motion_fn(vid, frame):
        u = enc[frame // stride, truth.index(vid)]
        return MotionMeasurement(vid, frame / fr, float(u[0]), float(u[1]))

    return UwbNetwork(schedule, clocks, channel, lambda t: truth.positions_at(t, fr), rc, streams["channel"],
                      motion_fn, stride, Sniffer(schedule, channel))


def channel_model(s: Scenario) -> ChannelModel:
    net = s.network
    # receive jitter chosen so the two-way range noise equals sigma_range
    jitter = s.noise.sigma_range * math.sqrt(2.0) / SPEED_OF_LIGHT
    return ChannelModel(net["drop_probability"], net["link_drop_probability"], jitter, net["resolution"])


def live_packets(network: UwbNetwork, n_frames: int, log: list | None = None) -> Iterator[list]:
    for _ in range(n_frames):
        packets, _ = network.step(collect=False)
        if log is not None:
            log.append(packets)
        yield packets


def packet_frames(s: Scenario, packet_stream, sniffer: Sniffer) -> Iterator[FrameData]:
    """Run the sniffer over a stream of per-frame packet lists."""
    ids = sorted(s.ids)
    pairs = pair_list(ids)
    pindex = {p: k for k, p in enumerate(pairs)}
    stride = s.motion_stride
    for packets in packet_stream:
        if not packets:
            continue
        frame = packets[0].frame_index
        out = sniffer.collect(packets, frame)
        r = np.full(len(pairs), np.nan)
        for m in out.ranges:
            r[pindex[m.pair]] = m.distance
        motion = None
        if frame % stride == 0:
            motion = np.full((len(ids), 2), np.nan)
            for m in out.motions:
                motion[ids.index(m.vehicle_id)] = (m.linear_velocity, m.turn_rate)
        yield FrameData(frame, r, motion)


@dataclass
class RunResult:
    scenario: Scenario
    metrics: RunMetrics
    times: np.ndarray
    vehicle_ids: tuple
    estimate: np.ndarray
    truth: np.ndarray
    baseline: np.ndarray
    sigmas: np.ndarray
    init_report: InitReport | None
    packets: list | None = None
    extra: dict = field(default_factory=dict)


def _pair_value(r, pairs_index, a, b):
    v = r[pairs_index[(min(a, b), max(a, b))]]
    return None if not np.isfinite(v) else float(v)


def run_frames(s: Scenario, frames: Iterator[FrameData], truth: Truth, enc: np.ndarray) -> RunResult:
    """Consume a frame stream through the three phases and score the result."""
    ids = sorted(s.ids)
    pairs = pair_list(ids)
    pidx = {p: k for k, p in enumerate(pairs)}
    stride = s.motion_stride
    fr = s.rates["frame"]
    f_static, f0 = s.frames("static"), s.frames("static") + s.frames("linear")
    f_end = s.total_frames
    frame_map = AnchorFrame.from_truth(s, truth)
    truth_frame = frame_map.apply(truth.poses)
    est_ids = s.estimated_ids
    est_cols = [ids.index(k) for k in est_ids]
    n_steps = (f_end - f0) // stride + 1

    frames = iter(frames)
    report = None
    init_poses, init_covs, anchors = {}, {}, {}
    truth_std = np.asarray(s.init["truth_std"], dtype=float)
    pipeline = s.init["mode"] == "pipeline"

    def next_frame():
        try:
            return next(frames)
        except StopIteration as exc:
            raise InitializationError("frame stream ended early") from exc

    # phase 1: static ranging
    samples = []
    data = None
    for f in range(f_static):
        data = next_frame()
        if pipeline:
            M = np.full((len(ids), len(ids)), np.nan)
            for (a, b), k in pidx.items():
                M[ids.index(a), ids.index(b)] = M[ids.index(b), ids.index(a)] = data.ranges[k]
            samples.append(M)
    heading_inits = {}
    if pipeline:
        a1, a2 = s.static_ids
        hints = {ids.index(v.id): v.y_sign for v in s.vehicles if v.y_sign in (1, -1)}
        try:
            D = AdjacencyMatrix.from_samples(np.array(samples))
            report = establish_frame(D, ids.index(a1), ids.index(a2), hints)
        except (ValueError, RuntimeError) as exc:
            raise InitializationError(f"frame establishment failed: {exc}") from exc
        frame_fix = report.frame
        for vid in s.dynamic_ids:
            y = report.positions[ids.index(vid)][1]
            sign = resolve_y_sign(float(y), s.noise.sigma_range, s.vehicle(vid).y_sign)
            report.y_signs[vid] = sign
            window = LinearMotionWindow.from_noise(s.noise.sigma_v, s.noise.sigma_omega, int(s.init["window"]))
            heading_inits[vid] = HeadingInitializer(vid, frame_fix, sign, window, s.noise.sigma_range)
    # phase 2: linear motion, fed at the motion rate
    for f in range(f_static, f0 + 1):
        data = next_frame()
        if pipeline and data.motion is not None:
            for vid, hi in heading_inits.items():
                u = data.motion[ids.index(vid)]
                if not np.all(np.isfinite(u)):
                    continue
                d1 = _pair_value(data.ranges, pidx, vid, s.static_ids[0])
                d2 = _pair_value(data.ranges, pidx, vid, s.static_ids[1])
                hi.feed(MotionMeasurement(vid, f / fr, float(u[0]), float(u[1])), d1, d2)
    t0 = f0 / fr
    if data is None or data.motion is None:
        raise InitializationError("no motion sample at the start of the run phase")
    initial_motion = data.motion.copy()
    for vid in est_ids:
        c = ids.index(vid)
        if pipeline and vid in heading_inits:
            try:
                pose, cov = heading_inits[vid].result(at_time=t0)
            except NotReady as exc:
                raise InitializationError(f"vehicle {vid}: heading initialization incomplete ({exc})") from exc
            init_poses[vid], init_covs[vid] = pose, cov
        elif pipeline:
            # a parked vehicle the filter does not treat as an anchor: surveyed position, true heading
            p = report.positions[c]
            init_poses[vid] = VehicleState(p[0], p[1], truth_frame[f0, c, 2])
            var = max(s.noise.sigma_range ** 2, 1e-12)
            init_covs[vid] = np.diag([var, var, INIT_HEADING_STD ** 2])
        else:
            init_poses[vid] = VehicleState.from_array(truth_frame[f0, c])
            init_covs[vid] = np.diag(np.maximum([truth_std[0] ** 2, truth_std[0] ** 2, truth_std[1] ** 2], 1e-24))
    for vid in s.anchors:
        anchors[vid] = report.positions[ids.index(vid)] if pipeline else truth_frame[0, ids.index(vid), :2]
    if report is not None:
        report.poses = dict(init_poses)
        report.covariances = dict(init_covs)

    belief = FleetBelief.from_states(init_poses, init_covs, anchors, time=t0)
    est = CollaborativeEstimator(belief, ids, s.filter_noise(), initial_motion[est_cols], s.estimator_config())
    estimate = np.empty((n_steps, len(est_ids), 3))
    sigmas = np.empty_like(estimate)
    estimate[0] = belief.poses
    sigmas[0] = np.sqrt(np.diag(belief.covariance)).reshape(-1, 3)
    step = 1
    # phase 3: filter
    for f in range(f0 + 1, f_end + 1):
        data = next_frame()
        est.push_ranges(f / fr, data.ranges)
        if data.motion is not None:
            b = est.step(f / fr, data.motion[est_cols])
            estimate[step] = b.poses
            sigmas[step] = np.sqrt(np.maximum(np.diag(b.covariance), 0.0)).reshape(-1, 3)
            step += 1
    if step != n_steps:
        raise InitializationError(f"expected {n_steps} filter steps, got {step}")

    rows = np.arange(f0, f_end + 1, stride)
    times = rows / fr
    truth_run = truth_frame[rows][:, est_cols]
    k0 = f0 // stride
    baseline = np.stack([dead_reckon(truth_run[0, j], enc[k0:, c, 0], enc[k0:, c, 1], 1.0 / s.rates["motion"])
                         for j, c in enumerate(est_cols)], axis=1)
    m = compute_metrics(times, estimate, truth_run, est_ids, baseline, gated=est.belief.gated,
                        used=est.belief.used, init_report=report,
                        moving_ids=tuple(k for k in est_ids if k in s.dynamic_ids))
    return RunResult(s, m, times, tuple(est_ids), estimate, truth_run, baseline, sigmas, report)


def run_scenario(s: Scenario, seed: int | None = None, record_packets: bool = True) -> RunResult:
    """Simulate one scenario end to end.

    Raises :class:`InitializationError` when the initialization phases fail.
    """
    if seed is not None:
        s = s.with_overrides(seed=int(seed))
    streams = spawn_streams(s.seed)
    truth = build_truth(s, streams["trajectory"])
    enc = encoder_stream(truth, s, streams["encoder"])
    log = None
    if s.network["mode"] == "direct":
        frames = direct_frames(s, truth, enc, streams["range"])
    else:
        network = build_network(s, truth, enc, streams)
        log = [] if record_packets else None
        frames = packet_frames(s, live_packets(network, s.total_frames + 1, log), network.sniffer)
    res = run_frames(s, frames, truth, enc)
    res.packets = log
    return res


def replay_scenario(s: Scenario, packet_frames_list: list) -> RunResult:
    """Re-run the pipeline on a recorded packet log; truth is regenerated from the scenario seed."""
    streams = spawn_streams(s.seed)
    truth = build_truth(s, streams["trajectory"])
    enc = encoder_stream(truth, s, streams["encoder"])
    schedule = TdmaSchedule.for_vehicles(truth.ids, s.rates["frame"], s.tdma["slot_duration"])
    sniffer = Sniffer(schedule, channel_model(s))
    res = run_frames(s, packet_frames(s, iter(packet_frames_list), sniffer), truth, enc)
    res.packets = packet_frames_list
    return res


def run_initialization(s: Scenario, seed: int | None = None) -> InitReport:
    """Run phases 1 and 2 only and return the initialization report."""
    if s.init["mode"] != "pipeline":
        raise InitializationError("init-demo needs init.mode: pipeline")
    short = s.with_overrides(durations={**s.durations, "run": 1.0 / s.rates["motion"]})
    if seed is not None:
        short.seed = int(seed)
    return run_scenario(short, record_packets=False).init_report


def observability_report(s: Scenario, at="initial", rel_tol: float = 1e-9) -> RankReport:
    """Rank of the fleet observability matrix at the scenario's true configuration.

    ``at`` is ``"initial"`` or a time in seconds from the scenario start.
    The static vehicles counted as known anchors are those the estimator uses.
    """
    ids = sorted(s.ids)
    if at == "initial":
        poses = np.array([s.vehicle(k).pose for k in ids], dtype=float)
    else:
        truth = build_truth(s, spawn_streams(s.seed)["trajectory"])
        f = int(round(float(at) * s.rates["frame"]))
        if not 0 <= f < len(truth.frame_times):
            raise InitializationError(f"time {at} outside the scenario")
        poses = truth.poses[f]
    states = [VehicleState.from_array(p) for p in poses]
    static = [ids.index(k) for k in s.anchors]
    m = fleet_matrix(states, static_set=static)
    rep = numerical_rank(m, rel_tol)
    return rep


def run_row(s: Scenario, seed: int) -> dict:
    """Summary of one seeded run for Monte Carlo batches (picklable)."""
    row = {"seed": int(seed)}
    try:
        m = run_scenario(s, seed=seed, record_packets=False).metrics
    except InitializationError as exc:
        row.update(status=f"init-failed: {exc}")
        return row
    moving = m.moving_ids
    row.update(
        status="ok",
        position_rmse=m.fleet_position_rmse(moving),
        heading_rmse=m.fleet_heading_rmse(moving),
        odo_position_rmse=float(np.sqrt(np.mean(m.baseline_position_error[:, m.columns(moving)] ** 2))),
        final_error=m.final_error(moving),
        odo_final_error=m.final_error(moving, baseline=True),
        rmse_middle20=m.window_rmse(0.4, 0.6, moving),
        rmse_last20=m.window_rmse(0.8, 1.0, moving),
        thirds=[m.window_rmse(k / 3, (k + 1) / 3, moving) for k in range(3)],
        gated=m.gated,
        times=m.times,
        mean_error=m.position_error[:, m.columns(moving)].mean(axis=1),
        mean_odo_error=m.baseline_position_error[:, m.columns(moving)].mean(axis=1),
    )
    return row


def monte_carlo(s: Scenario, seeds, workers: int = 1) -> list:
    """Independent seeded runs, optionally fanned out over processes."""
    seeds = [int(x) for x in seeds]
    if workers <= 1 or len(seeds) == 1:
        return [run_row(s, k) for k in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_row, [s] * len(seeds), seeds))
