"""Scenario files: YAML schema, defaults and validation.

A scenario is a mapping with the keys below (all lengths in meters, times in
seconds, angles in radians)::

    name: two_anchor
    seed: 7
    arena: [12.0, 12.0]            # width, height; origin at the lower-left corner
    noise: {sigma_v: 0.2, sigma_omega: 0.1, sigma_range: 0.1}
    durations: {static: 0.5, linear: 5.0, run: 300.0}
    rates: {motion: 20, frame: 100, truth: 1000}
    tdma: {slot_duration: 0.001}
    network:
      mode: direct                 # direct | uwb
      drop_probability: 0.0        # whole packet lost
      link_drop_probability: 0.0   # one receiver misses a packet
      resolution: 1.565e-11        # timestamp granularity, 0 disables
      clock_offset_std: 1.0e-6
      clock_skew_std: 1.0e-5
      offset_density: 1.0e-21
      skew_density: 1.0e-23
    init:
      mode: pipeline               # pipeline | truth
      linear_speed: 0.5
      window: 20
      truth_std: [0.1, 0.05]       # position, heading prior when mode is truth
    estimator:
      anchors_used: 2              # how many static vehicles the filter treats as known
      smoothing_window: 5
      smoothing_weights: exponential
      smoothing_decay: 0.5
      gate_sigma: 6.0
      min_sigma_v: 0.0             # floors on the noise levels the filter assumes
      min_sigma_omega: 0.0
      min_sigma_range: 0.0
    vehicles:
      - {id: 0, pose: [1.0, 1.0, 0.0], static: true}
      - id: 2
        pose: [3.0, 6.0, 0.3]
        y_sign: 1                  # side of the anchor baseline (+1 left of it, -1 right)
        trajectory: {kind: random_waypoint, speed: 0.5, region: [2, 3, 10, 11]}

Trajectory kinds: ``random_waypoint`` (speed, region, tolerance),
``waypoints`` (points, speed, loop), ``lawnmower`` (region, spacing, speed),
``profile`` (segments of ``{v, omega, duration}``, repeated).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import yaml

from .errors import ScenarioError
from .estimator import EstimatorConfig
from .kinematics import NoiseSpec

DEFAULTS = {
    "name": "scenario",
    "seed": 0,
    "arena": [12.0, 12.0],
    "noise": {"sigma_v": 0.2, "sigma_omega": 0.1, "sigma_range": 0.1},
    "durations": {"static": 0.5, "linear": 5.0, "run": 300.0},
    "rates": {"motion": 20, "frame": 100, "truth": 1000},
    "tdma": {"slot_duration": 0.001},
    "network": {
        "mode": "direct",
        "drop_probability": 0.0,
        "link_drop_probability": 0.0,
        "resolution": 15.65e-12,
        "clock_offset_std": 1e-6,
        "clock_skew_std": 1e-5,
        "offset_density": 1e-21,
        "skew_density": 1e-23,
    },
    "init": {"mode": "pipeline", "linear_speed": 0.5, "window": 20, "truth_std": [0.1, 0.05]},
    "estimator": {
        "anchors_used": 2,
        "smoothing_window": 5,
        "smoothing_weights": "exponential",
        "smoothing_decay": 0.5,
        "gate_sigma": 6.0,
        "min_sigma_v": 0.0,
        "min_sigma_omega": 0.0,
        "min_sigma_range": 0.0,
    },
}

TRAJECTORY_KINDS = ("random_waypoint", "waypoints", "lawnmower", "profile")
MIN_SEPARATION = 0.1


@dataclass
class VehicleSpec:
    id: int
    pose: tuple
    static: bool = False
    trajectory: dict = field(default_factory=dict)
    y_sign: int | None = None


@dataclass
class Scenario:
    name: str
    seed: int
    arena: tuple
    noise: NoiseSpec
    durations: dict
    rates: dict
    tdma: dict
    network: dict
    init: dict
    estimator: dict
    vehicles: list
    source: str | None = None

    @property
    def ids(self) -> list:
        return [v.id for v in self.vehicles]

    @property
    def static_ids(self) -> list:
        return sorted(v.id for v in self.vehicles if v.static)

    @property
    def dynamic_ids(self) -> list:
        return sorted(v.id for v in self.vehicles if not v.static)

    def vehicle(self, vid: int) -> VehicleSpec:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)

    @property
    def anchors(self) -> list:
        """Static vehicles the filter treats as known anchors."""
        return self.static_ids[:self.estimator["anchors_used"]]

    @property
    def estimated_ids(self) -> list:
        return sorted(k for k in self.ids if k not in self.anchors)

    @property
    def motion_stride(self) -> int:
        return int(self.rates["frame"] // self.rates["motion"])

    def frames(self, phase: str) -> int:
        return int(round(self.durations[phase] * self.rates["frame"]))

    @property
    def total_frames(self) -> int:
        return self.frames("static") + self.frames("linear") + self.frames("run")

    def estimator_config(self) -> EstimatorConfig:
        e = self.estimator
        return EstimatorConfig(e["smoothing_window"], e["smoothing_weights"], e["smoothing_decay"], e["gate_sigma"])

    def filter_noise(self) -> NoiseSpec:
        e = self.estimator
        return NoiseSpec(max(self.noise.sigma_v, e["min_sigma_v"]), max(self.noise.sigma_omega, e["min_sigma_omega"]),
                         max(self.noise.sigma_range, e["min_sigma_range"]))

    def with_overrides(self, **changes) -> "Scenario":
        out = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(out, k, v)
        return out


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ScenarioError(f"unknown keys in {where}: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def scenario_from_dict(d: dict, source: str | None = None, min_vehicles: int = 3) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a mapping")
    top = set(DEFAULTS) | {"vehicles"}
    unknown = set(d) - top
    if unknown:
        raise ScenarioError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        noise = NoiseSpec(**_merge(DEFAULTS["noise"], d.get("noise", {}), "noise"))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"noise: {exc}") from exc
    vehicles = []
    for k, raw in enumerate(d.get("vehicles") or []):
        if not isinstance(raw, dict) or "id" not in raw or "pose" not in raw:
            raise ScenarioError(f"vehicle #{k} needs at least 'id' and 'pose'")
        extra = set(raw) - {"id", "pose", "static", "trajectory", "y_sign"}
        if extra:
            raise ScenarioError(f"vehicle {raw['id']}: unknown keys {sorted(extra)}")
        pose = tuple(float(c) for c in raw["pose"])
        if len(pose) != 3:
            raise ScenarioError(f"vehicle {raw['id']}: pose must be [x, y, theta]")
        vehicles.append(VehicleSpec(int(raw["id"]), pose, bool(raw.get("static", False)),
                                    dict(raw.get("trajectory") or {}), raw.get("y_sign")))
    s = Scenario(
        name=str(d.get("name", DEFAULTS["name"])),
        seed=int(d.get("seed", DEFAULTS["seed"])),
        arena=tuple(float(a) for a in d.get("arena", DEFAULTS["arena"])),
        noise=noise,
        durations=_merge(DEFAULTS["durations"], d.get("durations", {}), "durations"),
        rates=_merge(DEFAULTS["rates"], d.get("rates", {}), "rates"),
        tdma=_merge(DEFAULTS["tdma"], d.get("tdma", {}), "tdma"),
        network=_merge(DEFAULTS["network"], d.get("network", {}), "network"),
        init=_merge(DEFAULTS["init"], d.get("init", {}), "init"),
        estimator=_merge(DEFAULTS["estimator"], d.get("estimator", {}), "estimator"),
        vehicles=vehicles,
        source=source,
    )
    validate(s, min_vehicles=min_vehicles)
    return s


def load_scenario(path, min_vehicles: int = 3) -> Scenario:
    path = Path(path)
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: invalid YAML: {exc}") from exc
    return scenario_from_dict(d, source=str(path), min_vehicles=min_vehicles)


def _check_trajectory(v: VehicleSpec):
    t = v.trajectory
    kind = t.get("kind")
    if kind not in TRAJECTORY_KINDS:
        raise ScenarioError(f"vehicle {v.id}: trajectory kind must be one of {TRAJECTORY_KINDS}, got {kind!r}")
    if kind == "profile":
        segs = t.get("segments")
        if not segs or any(not {"v", "omega", "duration"} <= set(sg) for sg in segs):
            raise ScenarioError(f"vehicle {v.id}: profile needs segments with v, omega, duration")
        if any(float(sg["duration"]) <= 0 for sg in segs):
            raise ScenarioError(f"vehicle {v.id}: profile segment durations must be positive")
    if kind == "waypoints" and len(t.get("points") or []) < 1:
        raise ScenarioError(f"vehicle {v.id}: waypoint trajectory needs points")
    if "speed" in t and not float(t["speed"]) > 0:
        raise ScenarioError(f"vehicle {v.id}: speed must be positive")


def validate(s: Scenario, min_vehicles: int = 3):
    """Raise :class:`ScenarioError` unless the scenario is usable."""
    ids = s.ids
    if len(ids) < min_vehicles:
        raise ScenarioError(f"need at least {min_vehicles} vehicles, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ScenarioError("vehicle ids must be unique")
    n_static = len(s.static_ids)
    if n_static > 2:
        raise ScenarioError(f"at most 2 static vehicles are supported, got {n_static}")
    if not s.dynamic_ids:
        raise ScenarioError("scenario has no dynamic vehicle")
    w, h = s.arena
    if not (w > 0 and h > 0):
        raise ScenarioError("arena dimensions must be positive")
    for v in s.vehicles:
        x, y, th = v.pose
        if not all(math.isfinite(c) for c in v.pose):
            raise ScenarioError(f"vehicle {v.id}: non-finite pose")
        if not (0.0 <= x <= w and 0.0 <= y <= h):
            raise ScenarioError(f"vehicle {v.id}: initial position ({x}, {y}) outside the {w}x{h} arena")
        if v.y_sign not in (None, 1, -1):
            raise ScenarioError(f"vehicle {v.id}: y_sign must be +1 or -1")
        if not v.static:
            _check_trajectory(v)
    for a, b in combinations(s.vehicles, 2):
        if math.hypot(a.pose[0] - b.pose[0], a.pose[1] - b.pose[1]) <= MIN_SEPARATION:
            raise ScenarioError(f"vehicles {a.id} and {b.id} start closer than {MIN_SEPARATION} m")
    r = s.rates
    if r["frame"] % r["motion"] != 0 or r["truth"] % r["frame"] != 0:
        raise ScenarioError("frame rate must be a multiple of the motion rate and divide the truth rate")
    for phase in ("static", "linear", "run"):
        d = s.durations[phase]
        if d < 0:
            raise ScenarioError(f"duration {phase} must be >= 0")
        steps = d * r["motion"]
        if abs(steps - round(steps)) > 1e-9:
            raise ScenarioError(f"duration {phase}={d} is not a whole number of motion periods")
    if s.durations["run"] <= 0:
        raise ScenarioError("run duration must be positive")
    net = s.network
    if net["mode"] not in ("direct", "uwb"):
        raise ScenarioError(f"network.mode must be 'direct' or 'uwb', got {net['mode']!r}")
    if len(ids) * s.tdma["slot_duration"] > 1.0 / r["frame"]:
        raise ScenarioError("TDMA slots do not fit in one frame")
    for key in ("drop_probability", "link_drop_probability"):
        if not 0.0 <= net[key] <= 1.0:
            raise ScenarioError(f"network.{key} must lie in [0, 1]")
    ini = s.init
    if ini["mode"] not in ("pipeline", "truth"):
        raise ScenarioError(f"init.mode must be 'pipeline' or 'truth', got {ini['mode']!r}")
    if ini["mode"] == "pipeline":
        if n_static != 2:
            raise ScenarioError("the initialization pipeline needs exactly 2 static vehicles; use init.mode: truth")
        if s.durations["static"] <= 0 or s.durations["linear"] <= 0:
            raise ScenarioError("the initialization pipeline needs positive static and linear phases")
        if s.frames("linear") < ini["window"] * s.motion_stride + 10:
            raise ScenarioError("linear phase too short for the motion detector window")
    if not 0 <= s.estimator["anchors_used"] <= n_static:
        raise ScenarioError(f"estimator.anchors_used must lie in [0, {n_static}]")
    if s.estimator["smoothing_weights"] not in ("exponential", "uniform"):
        raise ScenarioError("estimator.smoothing_weights must be 'exponential' or 'uniform'")
    np.asarray(ini["truth_std"], dtype=float).reshape(2)
