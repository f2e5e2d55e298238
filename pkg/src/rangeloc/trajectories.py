"""Input generators for the dynamic vehicles and exact truth integration.

Generators emit ``(v, omega)`` knot values at the motion rate. A simple
pursuit controller drives toward waypoints with rate-limited commands; the
truth is then integrated with exact arcs at the truth rate, the input being
linearly interpolated between knots.
"""
from __future__ import annotations

import math

import numpy as np

from .kinematics import integrate_exact, midpoint_step, wrap_angle

CONTROLLER_DEFAULTS = {"speed": 0.5, "omega_max": 0.8, "accel": 0.5, "alpha": 2.0, "gain": 1.5, "tolerance": 0.3}


def _region(spec, arena, margin=1.0):
    if "region" in spec:
        return tuple(float(c) for c in spec["region"])
    return (margin, margin, arena[0] - margin, arena[1] - margin)


class WaypointSource:
    """Endless sequence of targets for one trajectory spec."""

    def __init__(self, spec: dict, arena, rng: np.random.Generator):
        self.kind = spec["kind"]
        self.rng = rng
        self.region = _region(spec, arena)
        self.points = []
        self.k = 0
        if self.kind == "waypoints":
            self.points = [tuple(map(float, p)) for p in spec["points"]]
            self.loop = bool(spec.get("loop", True))
        elif self.kind == "lawnmower":
            x0, y0, x1, y1 = self.region
            spacing = float(spec.get("spacing", 2.0))
            rows = np.arange(y0, y1 + 1e-9, spacing)
            pts = []
            for r, y in enumerate(rows):
                pts += [(x0, y), (x1, y)] if r % 2 == 0 else [(x1, y), (x0, y)]
            self.points = pts + pts[-2:0:-1]
            self.loop = True

    def next(self):
        if self.kind == "random_waypoint":
            x0, y0, x1, y1 = self.region
            return (float(self.rng.uniform(x0, x1)), float(self.rng.uniform(y0, y1)))
        if self.k >= len(self.points):
            if not self.loop:
                return self.points[-1]
            self.k = 0
        p = self.points[self.k]
        self.k += 1
        return p


def pursuit_inputs(spec: dict, pose0, u0, n_knots: int, dt: float, arena, rng: np.random.Generator):
    """Rate-limited waypoint pursuit; returns ``(v, omega)`` for ``n_knots`` knots after the first.

    ``u0`` is the input at the starting knot; the returned arrays hold the
    following ``n_knots`` values.
    """
    p = dict(CONTROLLER_DEFAULTS)
    p.update({k: float(v) for k, v in spec.items() if k in CONTROLLER_DEFAULTS})
    src = WaypointSource(spec, arena, rng)
    target = src.next()
    pose = tuple(float(c) for c in pose0)
    v, w = float(u0[0]), float(u0[1])
    out_v = np.empty(n_knots)
    out_w = np.empty(n_knots)
    dv, dw = p["accel"] * dt, p["alpha"] * dt
    for k in range(n_knots):
        dx, dy = target[0] - pose[0], target[1] - pose[1]
        dist = math.hypot(dx, dy)
        if dist < p["tolerance"]:
            target = src.next()
            dx, dy = target[0] - pose[0], target[1] - pose[1]
            dist = math.hypot(dx, dy)
        err = float(wrap_angle(math.atan2(dy, dx) - pose[2])) if dist > 1e-9 else 0.0
        w_cmd = max(-p["omega_max"], min(p["omega_max"], p["gain"] * err))
        v_cmd = p["speed"] * max(math.cos(err), 0.0) * min(1.0, dist / max(p["tolerance"], 1e-9) + 0.2)
        v_new = v + max(-dv, min(dv, v_cmd - v))
        w_new = w + max(-dw, min(dw, w_cmd - w))
        pose = midpoint_step(pose, v, w, v_new, w_new, dt)
        v, w = v_new, w_new
        out_v[k], out_w[k] = v, w
    return out_v, out_w


def profile_inputs(spec: dict, n_knots: int, dt: float):
    """Scripted ``(v, omega)`` segments, repeated cyclically."""
    segs = spec["segments"]
    total = sum(float(s["duration"]) for s in segs)
    t = (np.arange(1, n_knots + 1) * dt) % total
    bounds = np.cumsum([float(s["duration"]) for s in segs])
    idx = np.minimum(np.searchsorted(bounds, t, side="right"), len(segs) - 1)
    v = np.array([float(s["v"]) for s in segs])[idx]
    w = np.array([float(s["omega"]) for s in segs])[idx]
    return v, w


def run_inputs(spec: dict, pose0, u0, n_knots: int, dt: float, arena, rng):
    if spec["kind"] == "profile":
        return profile_inputs(spec, n_knots, dt)
    return pursuit_inputs(spec, pose0, u0, n_knots, dt, arena, rng)


def integrate_knots(pose0, v_knots, w_knots, knot_dt: float, substeps: int):
    """Exact-arc integration with inputs linear between knots.

    Returns poses at every substep, ``(substeps * (len(v_knots) - 1) + 1, 3)``.
    Each substep uses the interpolated input at its own midpoint, held
    constant over the substep.
    """
    v_knots = np.asarray(v_knots, dtype=float)
    w_knots = np.asarray(w_knots, dtype=float)
    frac = (np.arange(substeps) + 0.5) / substeps
    v = (v_knots[:-1, None] * (1 - frac) + v_knots[1:, None] * frac).ravel()
    w = (w_knots[:-1, None] * (1 - frac) + w_knots[1:, None] * frac).ravel()
    return integrate_exact(np.asarray(pose0, dtype=float), v, w, knot_dt / substeps)
