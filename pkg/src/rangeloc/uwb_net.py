"""Simulated UWB TDMA broadcast network with clock synchronization.

Every vehicle owns one slot of a TDMA frame and broadcasts once per frame when
its own clock reaches the slot start. All other vehicles timestamp the arrival
with their own clocks. A sniffer collects every packet, keeps one two-state
(offset, skew) clock filter per vehicle pair and turns reciprocal timestamp
pairs into time-of-flight ranges.

Timestamps are carried as *slot-relative* local readings: the local clock
value minus the nominal start of the slot in which the packet was sent. This
keeps every stored number within a few milliseconds of zero, so double
precision resolves far below a picosecond even late in a long run. It plays
the role of the wrapping hardware counter of a real transceiver.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import InvalidArgument, StaleInput
from .kinematics import MotionMeasurement, RangeMeasurement

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299792458.0
#: timestamp granularity of a typical UWB transceiver
DEFAULT_RESOLUTION = 15.65e-12
MAX_SKEW = 1e-4
STALE_FRAMES = 5

PACKET_LOG_COLUMNS = ["frame", "slot", "sender", "tx_ts", "motion_t", "v", "omega", "n_rx"]


@dataclass(frozen=True)
class ClockState:
    """Clock offset (seconds) and skew (s/s) with random-walk densities."""

    offset: float = 0.0
    skew: float = 0.0
    offset_density: float = 1e-21
    skew_density: float = 1e-23

    def __post_init__(self):
        if not abs(self.skew) < MAX_SKEW:
            raise InvalidArgument(f"skew {self.skew} exceeds {MAX_SKEW}")
        if self.offset_density < 0 or self.skew_density < 0:
            raise InvalidArgument("noise densities must be >= 0")

    def offset_at(self, elapsed: float) -> float:
        """Offset ``elapsed`` seconds after the state's reference time, ignoring noise."""
        return self.offset + self.skew * elapsed


def clock_noise_cov(q_offset: float, q_skew: float, dt: float) -> np.ndarray:
    """Covariance of the (offset, skew) increment over ``dt`` for the two random walks."""
    return np.array([
        [q_offset * dt + q_skew * dt ** 3 / 3.0, q_skew * dt ** 2 / 2.0],
        [q_skew * dt ** 2 / 2.0, q_skew * dt],
    ])


def advance_clock(c: ClockState, true_dt: float, rng: np.random.Generator) -> ClockState:
    """Advance a clock by ``true_dt`` seconds of true time.

    The offset integrates the skew exactly; both random walks are sampled from
    their exact discrete covariance. Three standard normals are always drawn.
    """
    if not true_dt > 0.0:
        raise InvalidArgument(f"true_dt must be positive, got {true_dt}")
    n = rng.standard_normal(3)
    ds = math.sqrt(c.skew_density * true_dt)
    d_skew = ds * n[1]
    d_offset = (math.sqrt(c.offset_density * true_dt) * n[0] + ds * true_dt / 2.0 * n[1]
                + math.sqrt(c.skew_density * true_dt ** 3 / 12.0) * n[2])
    skew = c.skew + d_skew
    # the random walk can in principle leave the crystal bound; clip rather than fail mid-run
    skew = float(np.clip(skew, -MAX_SKEW * (1 - 1e-9), MAX_SKEW * (1 - 1e-9)))
    return replace(c, offset=c.offset + c.skew * true_dt + d_offset, skew=skew)


@dataclass(frozen=True)
class TdmaSchedule:
    slots: tuple
    frame_rate: float = 100.0
    slot_duration: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if len(set(self.slots)) != len(self.slots):
            raise InvalidArgument("slot assignment must be a bijection")
        if not self.frame_rate > 0 or not self.slot_duration > 0:
            raise InvalidArgument("frame rate and slot duration must be positive")
        if len(self.slots) * self.slot_duration > self.frame_period * (1 + 1e-12):
            raise InvalidArgument(f"{len(self.slots)} slots of {self.slot_duration}s exceed the frame period")

    @classmethod
    def for_vehicles(cls, vehicle_ids: Iterable[int], frame_rate: float = 100.0, slot_duration: float = 1e-3):
        return cls(tuple(sorted(vehicle_ids)), frame_rate, slot_duration)

    @property
    def frame_period(self) -> float:
        return 1.0 / self.frame_rate

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    def slot_of(self, vehicle_id: int) -> int:
        return self.slots.index(vehicle_id)

    def owner(self, slot: int) -> int:
        return self.slots[slot]

    def frame_start(self, frame: int) -> float:
        return frame / self.frame_rate

    def slot_offset(self, vehicle_id: int) -> float:
        """Nominal start of the vehicle's slot relative to the frame start."""
        return self.slot_of(vehicle_id) * self.slot_duration

    def slot_start(self, frame: int, vehicle_id: int) -> float:
        return self.frame_start(frame) + self.slot_offset(vehicle_id)


@dataclass
class RxRecord:
    receiver_id: int
    rx_timestamp: float


@dataclass
class Packet:
    """One broadcast. Timestamps are slot-relative local readings."""

    sender_id: int
    slot_index: int
    frame_index: int
    tx_timestamp: float
    clock_params: dict = field(default_factory=dict)
    motion: MotionMeasurement | None = None
    rx_records: list = field(default_factory=list)
    dropped: bool = False

    def rx_of(self, receiver_id: int):
        for r in self.rx_records:
            if r.receiver_id == receiver_id:
                return r.rx_timestamp
        return None


@dataclass(frozen=True)
class ChannelModel:
    drop_probability: float = 0.0
    link_drop_probability: float = 0.0
    rx_jitter: float = 0.0
    resolution: float = DEFAULT_RESOLUTION
    max_range: float = math.inf

    def __post_init__(self):
        for p in (self.drop_probability, self.link_drop_probability):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgument(f"probability {p} outside [0, 1]")
        if self.rx_jitter < 0 or self.resolution < 0:
            raise InvalidArgument("jitter and resolution must be >= 0")

    def quantize(self, t: float) -> float:
        if self.resolution <= 0.0:
            return t
        return round(t / self.resolution) * self.resolution


def broadcast_slot(schedule: TdmaSchedule, frame: int, vehicle_id: int, clocks: Mapping[int, ClockState],
                   positions, channel: ChannelModel, rng: np.random.Generator,
                   motion: MotionMeasurement | None = None, clock_params: dict | None = None) -> Packet:
    """Simulate one broadcast of ``vehicle_id`` in ``frame``.

    Parameters
    ----------
    clocks : mapping
        Clock state of every vehicle referenced to the nominal frame start.
    positions : mapping or callable
        Vehicle id -> (x, y), or a callable ``t -> mapping`` evaluated at the
        true transmit time.

    The sender transmits when its local clock reads the nominal slot start.
    Each receiver stamps the true arrival time read on its own clock, plus
    Gaussian jitter, quantized to the channel resolution. The random draws
    per packet are fixed in number so streams stay aligned across settings.
    """
    ids = sorted(clocks)
    if vehicle_id not in schedule.slots:
        raise InvalidArgument(f"vehicle {vehicle_id} owns no slot")
    slot = schedule.slot_of(vehicle_id)
    lead = schedule.slot_offset(vehicle_id)
    ca = clocks[vehicle_id]
    # true transmit time relative to the nominal slot start: t + o_a(t) = slot start
    u_tx = -(ca.offset + ca.skew * lead) / (1.0 + ca.skew)
    t_tx = schedule.slot_start(frame, vehicle_id) + u_tx
    pos = positions(t_tx) if callable(positions) else positions
    pa = np.asarray(pos[vehicle_id], dtype=float)

    others = [k for k in ids if k != vehicle_id]
    u_drop = rng.random()
    u_link = rng.random(len(others))
    jitter = rng.standard_normal(len(others))
    packet = Packet(vehicle_id, slot, frame, channel.quantize(0.0), dict(clock_params or {}), motion)
    if u_drop < channel.drop_probability:
        packet.rx_records = []
        packet.dropped = True
        return packet
    for k, receiver in enumerate(others):
        if u_link[k] < channel.link_drop_probability:
            continue
        d = float(np.hypot(*(np.asarray(pos[receiver], dtype=float) - pa)))
        if d > channel.max_range:
            continue
        u_rx = u_tx + d / SPEED_OF_LIGHT
        cb = clocks[receiver]
        local = u_rx + cb.offset + cb.skew * (lead + u_rx) + channel.rx_jitter * jitter[k]
        packet.rx_records.append(RxRecord(receiver, channel.quantize(local)))
    return packet


@dataclass
class ReciprocalObservation:
    """Timestamps of one exchange a -> b and b -> a (slot-relative local readings).

    ``slot_a`` and ``slot_b`` are the nominal network times of the two slots.
    """

    id_a: int
    id_b: int
    frame: int
    slot_a: float
    tx_a: float
    rx_b: float
    slot_b: float
    tx_b: float
    rx_a: float

    @property
    def y_ab(self) -> float:
        return self.rx_b - self.tx_a

    @property
    def y_ba(self) -> float:
        return self.rx_a - self.tx_b

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.slot_a + self.slot_b)

    def separation(self, offset_estimate: float) -> float:
        """True-time lag ``t_a - t_b`` between the two transmissions, on a's time axis."""
        return (self.slot_a - self.slot_b) + (self.tx_a - self.tx_b) + offset_estimate


@dataclass
class ClockSyncFilter:
    """Kalman filter on the relative clock of ``id_b`` with respect to ``id_a``.

    State is ``(offset_b - offset_a, skew_b - skew_a)``.
    """

    id_a: int
    id_b: int
    q_offset: float = 2e-21
    q_skew: float = 2e-23
    measurement_var: float = DEFAULT_RESOLUTION ** 2 / 12.0
    initial_skew_std: float = MAX_SKEW
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    time: float | None = None
    last_frame: int | None = None
    n_updates: int = 0

    @property
    def offset(self) -> float:
        return float(self.state[0])

    @property
    def skew(self) -> float:
        return float(self.state[1])

    @property
    def initialized(self) -> bool:
        return self.time is not None

    def estimate(self) -> ClockState:
        return ClockState(self.offset, float(np.clip(self.skew, -MAX_SKEW * 0.999999, MAX_SKEW * 0.999999)),
                          self.q_offset, self.q_skew)

    def predict(self, t: float):
        if self.time is None:
            return
        dt = t - self.time
        if dt < 0:
            raise InvalidArgument("clock filter time must not go backwards")
        if dt == 0:
            return
        F = np.array([[1.0, dt], [0.0, 1.0]])
        self.state = F @ self.state
        self.covariance = F @ self.covariance @ F.T + clock_noise_cov(self.q_offset, self.q_skew, dt)
        self.time = t

    def correct(self, z: float, t: float, var: float):
        R = max(var, 1e-30)
        if self.time is None:
            self.state = np.array([z, 0.0])
            self.covariance = np.diag([R, self.initial_skew_std ** 2])
            self.time = t
            return
        self.predict(t)
        S = self.covariance[0, 0] + R
        K = self.covariance[:, 0] / S
        self.state = self.state + K * (z - self.state[0])
        A = np.eye(2) - np.outer(K, [1.0, 0.0])
        self.covariance = A @ self.covariance @ A.T + R * np.outer(K, K)


def clock_sync_update(filt: ClockSyncFilter, obs: ReciprocalObservation | None, time: float | None = None,
                      frame: int | None = None, tof_estimate: float | None = None) -> ClockState:
    """Advance a pair clock filter with one reciprocal exchange.

    Without ``tof_estimate`` the measurement is half the difference of the
    two one-way lags, in which the propagation delay cancels. With it, the two
    one-way lags minus the delay are applied as separate measurements at
    their own transmit times. ``obs=None`` performs a prediction-only step to
    ``time``.
    """
    if obs is None:
        if time is None:
            raise InvalidArgument("prediction-only step needs a time")
        filt.predict(time)
        return filt.estimate()
    if (obs.id_a, obs.id_b) != (filt.id_a, filt.id_b):
        raise InvalidArgument("observation and filter refer to different pairs")
    if tof_estimate is None:
        filt.correct(0.5 * (obs.y_ab - obs.y_ba), obs.midpoint, filt.measurement_var)
    else:
        first = sorted([(obs.slot_a, obs.y_ab - tof_estimate), (obs.slot_b, tof_estimate - obs.y_ba)])
        for t, z in first:
            filt.correct(z, t, 2.0 * filt.measurement_var)
    filt.last_frame = obs.frame if frame is None else frame
    filt.n_updates += 1
    return filt.estimate()


def extract_tof(obs: ReciprocalObservation, filt: ClockSyncFilter, frame: int | None = None,
                frame_rate: float = 100.0, max_age: int = STALE_FRAMES) -> RangeMeasurement:
    """Two-way time-of-flight range from one reciprocal exchange.

    The mean of the two one-way lags cancels the relative offset; the
    remaining first-order term, relative skew times the slot separation, is
    removed with the filter's skew estimate. The receiver of the a -> b leg
    times the flight with its own (skewed) clock, so the sum is also divided
    by ``1 + skew / 2``.
    """
    frame = obs.frame if frame is None else frame
    if filt.last_frame is None or filt.n_updates < 2 or frame - filt.last_frame > max_age:
        raise StaleInput(f"clock estimate for pair ({filt.id_a}, {filt.id_b}) is missing or stale")
    tof = (0.5 * (obs.y_ab + obs.y_ba) - 0.5 * filt.skew * obs.separation(filt.offset)) / (1.0 + 0.5 * filt.skew)
    return RangeMeasurement(obs.id_a, obs.id_b, max(tof, 0.0) * SPEED_OF_LIGHT, frame / frame_rate)


@dataclass
class SnifferOutput:
    frame: int
    time: float
    ranges: list
    motions: list
    clock_report: dict


class Sniffer:
    """Host-side collector: owns the pair clock filters and extracts ranges."""

    def __init__(self, schedule: TdmaSchedule, channel: ChannelModel | None = None, q_offset: float = 2e-21,
                 q_skew: float = 2e-23, max_age: int = STALE_FRAMES):
        self.schedule = schedule
        channel = channel or ChannelModel()
        var = 0.5 * channel.rx_jitter ** 2 + channel.resolution ** 2 / 12.0
        ids = sorted(schedule.slots)
        self.filters = {(a, b): ClockSyncFilter(a, b, q_offset, q_skew, var)
                        for k, a in enumerate(ids) for b in ids[k + 1:]}
        self.max_age = max_age

    def observation(self, a: int, b: int, pa: Packet, pb: Packet) -> ReciprocalObservation | None:
        rx_b = pa.rx_of(b)
        rx_a = pb.rx_of(a)
        if rx_b is None or rx_a is None:
            return None
        s = self.schedule
        return ReciprocalObservation(a, b, pa.frame_index, s.slot_start(pa.frame_index, a), pa.tx_timestamp, rx_b,
                                     s.slot_start(pb.frame_index, b), pb.tx_timestamp, rx_a)

    def collect(self, packets: Iterable[Packet], frame: int) -> SnifferOutput:
        by_sender = {p.sender_id: p for p in packets if not p.dropped}
        t_frame = self.schedule.frame_start(frame)
        ranges = []
        for (a, b), filt in self.filters.items():
            obs = None
            if a in by_sender and b in by_sender:
                obs = self.observation(a, b, by_sender[a], by_sender[b])
            if obs is None:
                if filt.initialized:
                    clock_sync_update(filt, None, time=max(filt.time, t_frame))
                continue
            clock_sync_update(filt, obs, frame=frame)
            try:
                ranges.append(extract_tof(obs, filt, frame, self.schedule.frame_rate, self.max_age))
            except StaleInput:
                pass
        motions = [by_sender[k].motion for k in sorted(by_sender) if by_sender[k].motion is not None]
        report = {pair: (f.offset, f.skew, f.last_frame) for pair, f in self.filters.items() if f.initialized}
        return SnifferOutput(frame, t_frame, ranges, motions, report)


def sniffer_collect(sniffer: Sniffer, packets: Iterable[Packet], frame: int):
    """Functional form of :meth:`Sniffer.collect`; returns ``(ranges, motions, clock_report)``."""
    out = sniffer.collect(packets, frame)
    return out.ranges, out.motions, out.clock_report


class UwbNetwork:
    """Frame-by-frame discrete-event loop over the TDMA schedule.

    Parameters
    ----------
    schedule : TdmaSchedule
    clocks : dict
        Initial clock of each vehicle at network time zero.
    channel : ChannelModel
    position_fn : callable
        ``t -> {vehicle_id: (x, y)}`` true positions.
    motion_fn : callable, optional
        ``(vehicle_id, frame) -> MotionMeasurement`` called on motion frames.
    rng_clock, rng_channel : numpy Generator
    motion_every : int
        A motion payload rides in every ``motion_every``-th frame.
    """

    def __init__(self, schedule: TdmaSchedule, clocks: dict, channel: ChannelModel,
                 position_fn: Callable, rng_clock: np.random.Generator, rng_channel: np.random.Generator,
                 motion_fn: Callable | None = None, motion_every: int = 5, sniffer: Sniffer | None = None):
        self.schedule = schedule
        self.clocks = dict(clocks)
        self.channel = channel
        self.position_fn = position_fn
        self.motion_fn = motion_fn
        self.motion_every = motion_every
        self.rng_clock = rng_clock
        self.rng_channel = rng_channel
        self.sniffer = sniffer or Sniffer(schedule, channel)
        self.frame = 0

    def _clock_params(self, sender: int) -> dict:
        out = {}
        for (a, b), f in self.sniffer.filters.items():
            if f.initialized and sender in (a, b):
                out[b if sender == a else a] = (f.offset, f.skew)
        return out

    def step(self, collect: bool = True) -> tuple[list, SnifferOutput | None]:
        """Run one frame; returns the packets and the sniffer output.

        With ``collect=False`` the packets are only produced, leaving the
        sniffer to a downstream consumer (the output is then ``None``).
        """
        frame = self.frame
        packets = []
        carries_motion = self.motion_fn is not None and frame % self.motion_every == 0
        for vid in self.schedule.slots:
            motion = self.motion_fn(vid, frame) if carries_motion else None
            packets.append(broadcast_slot(self.schedule, frame, vid, self.clocks, self.position_fn, self.channel,
                                          self.rng_channel, motion, self._clock_params(vid)))
        out = self.sniffer.collect(packets, frame) if collect else None
        dt = self.schedule.frame_period
        self.clocks = {k: advance_clock(c, dt, self.rng_clock) for k, c in sorted(self.clocks.items())}
        self.frame += 1
        return packets, out


def _fmt(x) -> str:
    return repr(float(x))


def write_packet_log(path, frames: Iterable[list]):
    """Write packets as CSV rows.

    Columns: ``frame, slot, sender, tx_ts, motion_t, v, omega, n_rx`` then
    ``receiver, rx_ts`` repeated ``n_rx`` times. Timestamps are slot-relative
    local readings in seconds. The motion fields are empty when the packet
    carries no motion sample; dropped packets are written with ``n_rx = -1``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PACKET_LOG_COLUMNS + ["receiver", "rx_ts", "..."])
        for packets in frames:
            for p in packets:
                w.writerow(packet_row(p))


def packet_row(p: Packet) -> list:
    m = p.motion
    motion = ["", "", ""] if m is None else [_fmt(m.timestamp), _fmt(m.linear_velocity), _fmt(m.turn_rate)]
    n_rx = -1 if p.dropped else len(p.rx_records)
    row = [p.frame_index, p.slot_index, p.sender_id, _fmt(p.tx_timestamp)] + motion + [n_rx]
    for r in p.rx_records:
        row += [r.receiver_id, _fmt(r.rx_timestamp)]
    return row


def read_packet_log(path) -> list:
    """Read a packet log; returns a list of per-frame packet lists in frame order."""
    frames: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:len(PACKET_LOG_COLUMNS)] != PACKET_LOG_COLUMNS:
            raise InvalidArgument(f"{path}: unexpected packet log header {header}")
        for lineno, row in enumerate(r, start=2):
            try:
                frame, slot, sender = int(row[0]), int(row[1]), int(row[2])
                motion = None
                if row[4] != "":
                    motion = MotionMeasurement(sender, float(row[4]), float(row[5]), float(row[6]))
                n_rx = int(row[7])
                p = Packet(sender, slot, frame, float(row[3]), {}, motion)
                if n_rx < 0:
                    p.dropped = True
                for k in range(max(n_rx, 0)):
                    p.rx_records.append(RxRecord(int(row[8 + 2 * k]), float(row[9 + 2 * k])))
            except (ValueError, IndexError) as exc:
                raise InvalidArgument(f"{path}:{lineno}: malformed packet record ({exc})") from exc
            frames.setdefault(frame, []).append(p)
    return [frames[k] for k in sorted(frames)]
