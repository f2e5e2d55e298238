"""Motion-induced initialization.

Two stages:

1. Coordinate establishment while the whole fleet is parked: an averaged
   distance matrix is embedded by classical MDS, moved into the frame fixed by
   the two static vehicles (first at the origin, second on the positive
   x-axis) and refined by minimizing the stress of the embedding.
2. Heading initialization: each dynamic vehicle drives straight; an energy
   detector on its encoder stream declares linear motion, its position is
   trilaterated from the two static vehicles, and a line fit through the
   track gives the heading.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, InconsistentRanges, InitializationError, InvalidArgument, NotReady
from .kinematics import MotionMeasurement, VehicleState, wrap_angle

logger = logging.getLogger(__name__)

HEADING_FLOOR = 0.05


@dataclass
class AdjacencyMatrix:
    entries: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.entries, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise InvalidArgument("adjacency matrix must be square")
        valid = np.isfinite(d) if self.valid is None else np.asarray(self.valid, dtype=bool)
        valid = valid & valid.T
        d = np.where(valid, d, 0.0)
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        np.fill_diagonal(valid, True)
        self.entries = d
        self.valid = valid

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def complete(self) -> bool:
        return bool(self.valid.all())

    @classmethod
    def from_samples(cls, samples) -> "AdjacencyMatrix":
        """Average a stack of ``(K, N, N)`` range snapshots; NaN marks a missing sample."""
        s = np.asarray(samples, dtype=float)
        count = np.sum(np.isfinite(s), axis=0)
        total = np.nansum(s, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
        return cls(mean, count > 0)


@dataclass
class FrameFix:
    anchor1_id: int
    anchor2_id: int
    baseline: float
    reflected: bool = False

    @property
    def anchor1_pos(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def anchor2_pos(self) -> np.ndarray:
        return np.array([self.baseline, 0.0])


def classical_mds(D: AdjacencyMatrix, rel_tol: float = 1e-8) -> np.ndarray:
    """Planar coordinates from a complete distance matrix.

    Double-centers the squared distances and keeps the two leading
    eigenpairs. The result is defined up to a rigid motion and a reflection.

    Raises
    ------
    DegenerateConfiguration
        If fewer than two eigenvalues are positive beyond ``rel_tol`` times the
        largest (collinear or noise-dominated geometry).
    """
    if not isinstance(D, AdjacencyMatrix):
        D = AdjacencyMatrix(D)
    n = D.size
    if n < 3:
        raise InvalidArgument("classical MDS needs at least 3 points")
    if not D.complete:
        raise InvalidArgument("distance matrix has missing entries")
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    B = -0.5 * J @ (D.entries ** 2) @ J
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 0.0 or evals[1] <= rel_tol * evals[0]:
        raise DegenerateConfiguration(f"fewer than 2 positive eigenvalues: {evals[:3]}")
    return evecs[:, :2] * np.sqrt(evals[:2])


def fix_gauge(points, anchor1: int, anchor2: int, reference_signs: dict | None = None):
    """Move an embedding into the frame fixed by two anchors.

    ``anchor1`` goes to the origin and ``anchor2`` onto the positive x-axis.
    ``reference_signs`` maps vehicle ids to the expected sign of their y
    coordinate; the embedding is reflected about the x-axis when the
    (|y|-weighted) hint vote disagrees. Without hints the chirality of the
    input is kept.

    Returns
    -------
    points : (N, 2) ndarray
    frame : FrameFix
    """
    p = np.array(points, dtype=float)
    if anchor1 == anchor2:
        raise InvalidArgument("anchors must differ")
    base = p[anchor2] - p[anchor1]
    length = float(np.hypot(*base))
    if length <= 1e-12:
        raise DegenerateConfiguration("anchors coincide in the embedding")
    c, s = base / length
    R = np.array([[c, s], [-s, c]])
    q = (p - p[anchor1]) @ R.T
    q[anchor1] = 0.0
    q[anchor2] = (length, 0.0)
    reflected = False
    if reference_signs:
        vote = sum(float(sign) * q[vid, 1] for vid, sign in reference_signs.items())
        if vote < 0.0:
            q[:, 1] = -q[:, 1]
            q[anchor2, 1] = 0.0
            reflected = True
    return q, FrameFix(anchor1, anchor2, length, reflected)


def stress(points, D) -> float:
    """L(p) = 1/2 sum over ordered pairs i != j of (d_ij - |p_i - p_j|)^2."""
    d = D.entries if isinstance(D, AdjacencyMatrix) else np.asarray(D)
    p = np.asarray(points)
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    r = d - dist
    np.fill_diagonal(r, 0.0)
    return 0.5 * float(np.sum(r ** 2))


@dataclass
class RefineResult:
    points: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    position_covariance: np.ndarray = field(repr=False, default=None)
    costs: list = field(repr=False, default_factory=list)


def refine_positions(points, D: AdjacencyMatrix, frame: FrameFix, max_iter: int = 200,
                     tol: float = 1e-10) -> RefineResult:
    """Minimize the embedding stress under the anchor gauge.

    Gauss-Newton on the pairwise residuals with backtracking; a gradient step
    replaces the GN direction when the normal matrix is ill-conditioned.
    Anchor 1 is pinned at the origin and anchor 2 at ``y = 0``; its ``x``
    stays free. Stops when the per-iteration decrease drops below ``tol``.
    """
    if not isinstance(D, AdjacencyMatrix):
        D = AdjacencyMatrix(D)
    p = np.array(points, dtype=float)
    n = p.shape[0]
    pinned = {2 * frame.anchor1_id, 2 * frame.anchor1_id + 1, 2 * frame.anchor2_id + 1}
    free = np.array([k for k in range(2 * n) if k not in pinned])
    iu, ju = np.triu_indices(n, 1)
    mask = D.valid[iu, ju]
    iu, ju = iu[mask], ju[mask]
    d = D.entries[iu, ju]

    def residuals(q):
        diff = q[iu] - q[ju]
        dist = np.linalg.norm(diff, axis=1)
        return d - dist, diff, dist

    def cost_of(q):
        # half the ordered-pair sum equals the sum over unordered pairs
        return float(np.sum(residuals(q)[0] ** 2))

    cost = cost_of(p)
    initial = cost
    costs = [cost]
    converged = False
    it = 0
    J = None
    for it in range(1, max_iter + 1):
        r, diff, dist = residuals(p)
        if np.any(dist <= 1e-12):
            raise DegenerateConfiguration("coincident points during refinement")
        u = diff / dist[:, None]
        J = np.zeros((len(d), 2 * n))
        rows = np.arange(len(d))
        # residual r = d - |p_i - p_j|: dr/dp_i = -u, dr/dp_j = +u
        J[rows, 2 * iu] = -u[:, 0]
        J[rows, 2 * iu + 1] = -u[:, 1]
        J[rows, 2 * ju] = u[:, 0]
        J[rows, 2 * ju + 1] = u[:, 1]
        Jf = J[:, free]
        g = Jf.T @ r
        A = Jf.T @ Jf
        try:
            if np.linalg.cond(A) > 1e12:
                raise np.linalg.LinAlgError
            step = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            step = -g
        t = 1.0
        improved = False
        while t > 1e-12:
            q = p.reshape(-1).copy()
            q[free] += t * step
            q = q.reshape(n, 2)
            new = cost_of(q)
            if new <= cost:
                improved = True
                break
            t *= 0.5
        if not improved:
            converged = True
            break
        decrease = cost - new
        p, cost = q, new
        costs.append(cost)
        if decrease < tol:
            converged = True
            break
    else:
        logger.warning("stress refinement hit the iteration cap (%d)", max_iter)

    cov = None
    if J is not None:
        dof = max(len(d) - len(free), 1)
        sigma2 = cost / dof
        Jf = J[:, free]
        full = np.zeros((2 * n, 2 * n))
        try:
            full[np.ix_(free, free)] = sigma2 * np.linalg.pinv(Jf.T @ Jf)
        except np.linalg.LinAlgError:
            pass
        cov = np.array([full[2 * k:2 * k + 2, 2 * k:2 * k + 2] for k in range(n)])
    return RefineResult(p, cost, initial, it, converged, cov, costs)


@dataclass
class LinearMotionWindow:
    window_size: int = 20
    gamma_omega: float = 0.01
    gamma_v: float = 0.01
    samples: deque = field(default=None, repr=False)

    def __post_init__(self):
        if self.window_size < 2:
            raise InvalidArgument("window needs at least 2 samples")
        if not (self.gamma_omega > 0.0 and self.gamma_v > 0.0):
            raise InvalidArgument("thresholds must be positive")
        self.samples = deque(maxlen=self.window_size)

    @classmethod
    def from_noise(cls, sigma_v: float, sigma_omega: float, window_size: int = 20) -> "LinearMotionWindow":
        # pure-noise energy is sigma^2 with relative spread sqrt(2/N); stay three spreads above it
        # and add a floor (0.02 rad/s turning, 0.1 m/s driving) for noiseless encoders
        margin = 1.0 + 3.0 * math.sqrt(2.0 / window_size)
        gamma_omega = margin * sigma_omega ** 2 + 0.02 ** 2
        gamma_v = margin * sigma_v ** 2 + 0.1 ** 2
        return cls(window_size, gamma_omega, gamma_v)

    def push(self, sample: MotionMeasurement):
        self.samples.append(sample)

    @property
    def full(self) -> bool:
        return len(self.samples) == self.window_size

    def energies(self) -> tuple[float, float]:
        v = np.array([s.linear_velocity for s in self.samples])
        w = np.array([s.turn_rate for s in self.samples])
        return float(np.mean(w ** 2)), float(np.mean(v ** 2))


def detect_linear_motion(w: LinearMotionWindow) -> bool:
    """True when turn-rate energy is below and speed energy above their thresholds."""
    if not w.full:
        return False
    e_omega, e_v = w.energies()
    return e_omega < w.gamma_omega and e_v > w.gamma_v


def trilaterate(d1: float, d2: float, baseline: float, y_sign: int = 1, slack: float = 0.05) -> np.ndarray:
    """Position from ranges to anchor 1 at the origin and anchor 2 at ``(baseline, 0)``.

    Law of cosines at anchor 1: ``cos(phi) = (d1^2 + b^2 - d2^2) / (2 d1 b)``,
    ``x = d1 cos(phi)``, ``y = y_sign * d1 sin(phi)``. A cosine outside
    ``[-1, 1]`` by at most ``slack`` is clamped; beyond that the ranges are
    rejected.
    """
    if not (d1 > 0.0 and d2 > 0.0 and baseline > 0.0):
        raise InvalidArgument("ranges and baseline must be positive")
    if y_sign not in (1, -1):
        raise InvalidArgument("y_sign must be +1 or -1")
    cos_phi = (d1 * d1 + baseline * baseline - d2 * d2) / (2.0 * d1 * baseline)
    if abs(cos_phi) > 1.0 + slack:
        raise InconsistentRanges(f"cos(phi) = {cos_phi:.4f} violates the triangle inequality")
    cos_phi = min(1.0, max(-1.0, cos_phi))
    sin_phi = math.sqrt(max(0.0, 1.0 - cos_phi * cos_phi))
    return np.array([d1 * cos_phi, y_sign * d1 * sin_phi])


def fit_track(track, min_displacement: float = 0.2):
    """Total-least-squares line through a track.

    Returns ``(heading, centroid, direction, perp_residual_var, along)`` where
    ``direction`` points from the earlier to the later points and ``along``
    holds the signed coordinate of each point along the line.
    """
    t = np.asarray(track, dtype=float)
    if t.ndim != 2 or t.shape[0] < 2:
        raise NotReady("need at least two track points")
    if np.hypot(*(t[-1] - t[0])) < min_displacement:
        raise NotReady("track displacement below the minimum")
    centroid = t.mean(axis=0)
    centered = t - centroid
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if np.dot(direction, t[-1] - t[0]) < 0.0:
        direction = -direction
    along = centered @ direction
    perp = centered @ np.array([-direction[1], direction[0]])
    dof = max(len(t) - 2, 1)
    heading = wrap_angle(math.atan2(direction[1], direction[0]))
    return heading, centroid, direction, float(np.sum(perp ** 2) / dof), along


def initial_heading(track, min_displacement: float = 0.2) -> float:
    """Heading of the straight track, pointing from earlier to later points."""
    return fit_track(track, min_displacement)[0]


@dataclass
class InitReport:
    frame: FrameFix
    positions: dict
    anchor_positions: dict
    poses: dict = field(default_factory=dict)
    covariances: dict = field(default_factory=dict)
    refine: RefineResult | None = field(default=None, repr=False)
    y_signs: dict = field(default_factory=dict)

    def summary_lines(self) -> list[str]:
        f = self.frame
        lines = [
            f"frame: anchor1={f.anchor1_id} at (0, 0), anchor2={f.anchor2_id} at ({f.baseline:.4f}, 0)"
            + (" [reflected]" if f.reflected else ""),
        ]
        if self.refine is not None:
            lines.append(f"stress: initial={self.refine.initial_cost:.6g} final={self.refine.cost:.6g} "
                         f"iterations={self.refine.iterations} converged={self.refine.converged}")
        for vid, p in sorted(self.positions.items()):
            lines.append(f"vehicle {vid}: established position ({p[0]:.4f}, {p[1]:.4f})")
        for vid, pose in sorted(self.poses.items()):
            sd = np.sqrt(np.diag(self.covariances[vid]))
            lines.append(f"vehicle {vid}: initial pose ({pose.x:.4f}, {pose.y:.4f}, {pose.heading:.4f}) "
                         f"sd=({sd[0]:.4f}, {sd[1]:.4f}, {sd[2]:.4f})")
        return lines


def establish_frame(D: AdjacencyMatrix, anchor1: int, anchor2: int, reference_signs=None,
                    max_iter: int = 200) -> InitReport:
    """Classical MDS, gauge fixing and stress refinement in one call."""
    pts = classical_mds(D)
    pts, frame = fix_gauge(pts, anchor1, anchor2, reference_signs)
    res = refine_positions(pts, D, frame, max_iter=max_iter)
    frame.baseline = float(res.points[anchor2, 0])
    if frame.baseline <= 0.0:
        raise InitializationError("second anchor left the positive x-axis during refinement")
    positions = {k: res.points[k].copy() for k in range(D.size)}
    anchors = {anchor1: positions[anchor1], anchor2: positions[anchor2]}
    return InitReport(frame, positions, anchors, refine=res)


class HeadingInitializer:
    """Per-vehicle state machine: detect straight motion, trilaterate, fit the line.

    Feed it encoder samples and ranges to the two anchors at the motion rate;
    :meth:`result` yields the pose at the latest sample once enough track has
    been collected.
    """

    def __init__(self, vehicle_id: int, frame: FrameFix, y_sign: int, window: LinearMotionWindow,
                 sigma_range: float = 0.0, min_displacement: float = 0.2):
        self.vehicle_id = vehicle_id
        self.frame = frame
        self.y_sign = y_sign
        self.window = window
        self.sigma_range = sigma_range
        self.min_displacement = min_displacement
        self.times: list[float] = []
        self.track: list[np.ndarray] = []
        self.rejected = 0

    def feed(self, sample: MotionMeasurement, d1: float | None, d2: float | None) -> bool:
        self.window.push(sample)
        moving = detect_linear_motion(self.window)
        if not moving:
            if self.track:
                # straight segment ended; keep what was collected only if usable
                try:
                    fit_track(self.track, self.min_displacement)
                    return False
                except NotReady:
                    self.track.clear()
                    self.times.clear()
            return False
        if d1 is None or d2 is None:
            return True
        try:
            p = trilaterate(d1, d2, self.frame.baseline, self.y_sign)
        except (InconsistentRanges, InvalidArgument):
            self.rejected += 1
            return True
        self.track.append(p)
        self.times.append(sample.timestamp)
        return True

    def ready(self) -> bool:
        try:
            fit_track(self.track, self.min_displacement)
        except NotReady:
            return False
        return True

    def result(self, at_time: float | None = None):
        """Pose and covariance at ``at_time`` (default: last track time).

        The along-track coordinate is regressed linearly on time and the
        position is taken on the fitted line, so per-point range noise is
        averaged out.
        """
        heading, centroid, direction, perp_var, along = fit_track(self.track, self.min_displacement)
        t = np.asarray(self.times)
        if at_time is None:
            at_time = float(t[-1])
        A = np.column_stack([np.ones_like(t), t - t.mean()])
        coef, *_ = np.linalg.lstsq(A, along, rcond=None)
        s_at = coef[0] + coef[1] * (at_time - t.mean())
        resid = along - A @ coef
        along_var = float(np.sum(resid ** 2) / max(len(t) - 2, 1))
        pos = centroid + s_at * direction
        spread = float(np.sum((along - along.mean()) ** 2))
        var_heading = perp_var / spread if spread > 0 else math.inf
        n = len(t)
        # variance of a fitted line evaluated at an abscissa, relative to the sample variance
        lever_t = 1.0 / n + (at_time - t.mean()) ** 2 / max(float(np.sum((t - t.mean()) ** 2)), 1e-300)
        lever_s = 1.0 / n + (s_at - along.mean()) ** 2 / max(spread, 1e-300)
        var_pos = max(along_var * lever_t + perp_var * lever_s, self.sigma_range ** 2)
        cov = np.diag([var_pos, var_pos, max(var_heading, HEADING_FLOOR ** 2)])
        return VehicleState(float(pos[0]), float(pos[1]), heading), cov


def resolve_y_sign(established_y: float, sigma_range: float, hint: int | None = None) -> int:
    """Side of the anchor baseline a dynamic vehicle starts on.

    The hint wins when given; otherwise the established coordinate decides,
    provided it is farther than two range sigmas from the axis.
    """
    if hint in (1, -1):
        return int(hint)
    if abs(established_y) < 2.0 * sigma_range or established_y == 0.0:
        raise InitializationError("vehicle too close to the anchor baseline to resolve its side")
    return 1 if established_y > 0 else -1
