"""Planar unicycle kinematics, range model and noise injection.

Poses are ``(x, y, heading)`` in a global frame, meters and radians. Motion
inputs are ``(v, omega)`` pairs; the lateral velocity of a unicycle is
structurally zero and never represented.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

#: below this |omega * dt| the arc solution is replaced by its straight-line limit
ARC_THRESHOLD = 1e-8


def wrap_angle(a):
    """Wrap an angle (scalar or array) to the half-open interval (-pi, pi]."""
    if np.isscalar(a):
        return math.pi - (math.pi - a) % (2.0 * math.pi)
    a = np.asarray(a, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise InvalidArgument(f"non-finite pose {(self.x, self.y, self.heading)}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", float(wrap_angle(float(self.heading))))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class MotionMeasurement:
    vehicle_id: int
    timestamp: float
    linear_velocity: float
    turn_rate: float


@dataclass(frozen=True)
class RangeMeasurement:
    id_a: int
    id_b: int
    distance: float
    timestamp: float

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise InvalidArgument("range measurement needs two distinct vehicles")
        if not self.distance >= 0.0:
            raise InvalidArgument(f"negative or NaN distance {self.distance}")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.id_a, self.id_b) if self.id_a < self.id_b else (self.id_b, self.id_a)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_v: float = 0.0
    sigma_omega: float = 0.0
    sigma_range: float = 0.0

    def __post_init__(self):
        for name in ("sigma_v", "sigma_omega", "sigma_range"):
            if not getattr(self, name) >= 0.0:
                raise InvalidArgument(f"{name} must be >= 0")


def _check_finite(*values):
    for v in values:
        if not math.isfinite(v):
            raise InvalidArgument(f"non-finite input {v}")


def _advance(x, y, theta, v, omega, dt):
    # chord form of the arc: length v*dt*sinc(omega*dt/2) along theta + omega*dt/2
    dth = omega * dt
    if abs(dth) < ARC_THRESHOLD:
        step = v * dt
    else:
        half = 0.5 * dth
        step = v * dt * math.sin(half) / half
    mid = theta + 0.5 * dth
    return x + step * math.cos(mid), y + step * math.sin(mid), theta + dth


def propagate_exact(state: VehicleState, v: float, omega: float, dt: float) -> VehicleState:
    """Advance a pose under constant ``(v, omega)`` for ``dt`` seconds.

    Exact circular-arc solution of the unicycle model, falling back to the
    straight-line limit when ``|omega * dt| < ARC_THRESHOLD``.
    """
    _check_finite(v, omega, dt)
    if dt <= 0.0:
        raise InvalidArgument(f"dt must be positive, got {dt}")
    return VehicleState(*_advance(state.x, state.y, state.heading, v, omega, dt))


def midpoint_step(pose, v0, w0, v1, w1, dt):
    """Midpoint-rule increment for raw ``(x, y, theta)`` values; returns a tuple."""
    v = 0.5 * (v0 + v1)
    w = 0.5 * (w0 + w1)
    mid = pose[2] + 0.5 * w * dt
    return (pose[0] + v * dt * math.cos(mid), pose[1] + v * dt * math.sin(mid), pose[2] + w * dt)


def propagate_midpoint(state: VehicleState, u_k: MotionMeasurement, u_k1: MotionMeasurement) -> VehicleState:
    """Advance ``state`` over ``[u_k.timestamp, u_k1.timestamp]``.

    The input over the interval is the average of the two encoder samples and
    the heading used for the translation is the heading at the interval midpoint.
    """
    if u_k.vehicle_id != u_k1.vehicle_id:
        raise InvalidArgument("motion samples belong to different vehicles")
    dt = u_k1.timestamp - u_k.timestamp
    _check_finite(dt, u_k.linear_velocity, u_k.turn_rate, u_k1.linear_velocity, u_k1.turn_rate)
    if dt <= 0.0:
        raise InvalidArgument(f"non-positive interval {dt}")
    out = midpoint_step((state.x, state.y, state.heading), u_k.linear_velocity, u_k.turn_rate,
                        u_k1.linear_velocity, u_k1.turn_rate, dt)
    return VehicleState(*out)


def true_range(a: VehicleState, b: VehicleState) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def corrupt(value, sigma, rng: np.random.Generator):
    """Add zero-mean Gaussian noise of standard deviation ``sigma``.

    A standard normal is drawn even when ``sigma == 0`` so that the stream
    position does not depend on the noise level. Works elementwise on arrays.
    """
    if not sigma >= 0.0:
        raise InvalidArgument(f"sigma must be >= 0, got {sigma}")
    if np.isscalar(value):
        return value + sigma * rng.standard_normal()
    value = np.asarray(value, dtype=float)
    return value + sigma * rng.standard_normal(value.shape)


def integrate_exact(x0, v, omega, dt):
    """Vectorized exact-arc integration of one vehicle.

    ``v`` and ``omega`` hold the constant input on each of ``len(v)`` substeps
    of length ``dt``. Returns an ``(len(v) + 1, 3)`` array of poses, the first
    row being ``x0``; headings are wrapped.
    """
    v = np.asarray(v, dtype=float)
    omega = np.asarray(omega, dtype=float)
    dth = omega * dt
    theta = x0[2] + np.concatenate(([0.0], np.cumsum(dth)))
    half = 0.5 * dth
    small = np.abs(dth) < ARC_THRESHOLD
    safe = np.where(small, 1.0, half)
    sinc = np.where(small, 1.0, np.sin(safe) / safe)
    step = v * dt * sinc
    mid = theta[:-1] + half
    out = np.empty((len(v) + 1, 3))
    out[0] = x0
    out[1:, 0] = x0[0] + np.cumsum(step * np.cos(mid))
    out[1:, 1] = x0[1] + np.cumsum(step * np.sin(mid))
    out[:, 2] = wrap_angle(theta)
    return out
