"""Lie-derivative observability matrices for range-only fleets.

The measurement between two vehicles is taken as ``h = d**2 / 2``. For a
pair of moving vehicles the non-trivial Lie-derivative gradients are stacked
into a 7x6 matrix; for a moving vehicle ranging to a static vehicle of known
position the matrix is 3x3. Fleet matrices stack these blocks at the column
offsets of the dynamic vehicles; static vehicles contribute no columns.

All checks are numerical at a given configuration.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateConfiguration, InvalidArgument
from .kinematics import VehicleState

logger = logging.getLogger(__name__)

COINCIDENT_TOL = 1e-9
DEFAULT_REL_TOL = 1e-9

REGIMES = ("dynamic-only-pair", "dynamic-only-fleet", "one-anchor", "two-anchors")

PAIR_ROW_LABELS = (
    "L0",
    "L1[v_i]",
    "L1[v_j]",
    "L2[v_i,v_j]",
    "L2[v_i,w_i]",
    "L2[v_j,w_j]",
    "L3[v_i,v_j,w_i]",
)
ANCHOR_ROW_LABELS = ("L0", "L1[v_i]", "L2[v_i,w_i]")


@dataclass
class ObservabilityMatrix:
    entries: np.ndarray
    row_labels: list = field(default_factory=list)
    n_dynamic: int = 0
    dynamic_ids: tuple = ()
    anchor_ids: tuple = ()
    complete: bool = True
    connected: bool = True
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if self.entries.shape[1] % 3:
            raise InvalidArgument("column count must be a multiple of 3")
        if not self.row_labels:
            self.row_labels = [f"row{k}" for k in range(self.entries.shape[0])]

    @property
    def shape(self):
        return self.entries.shape


@dataclass
class GaugeBlock:
    entries: np.ndarray


@dataclass
class RankReport:
    rank: int
    singular_values: list
    predicted_rank: int | None = None
    regime: str | None = None
    columns: int = 0

    @property
    def full(self) -> bool:
        return self.rank == self.columns

    @property
    def deficiency(self) -> int:
        return self.columns - self.rank

    @property
    def verdict(self) -> str:
        return "FULL" if self.full else f"DEFICIENT by {self.deficiency}"


def _deltas(pi, pj):
    dx = float(pi[0] - pj[0])
    dy = float(pi[1] - pj[1])
    if math.hypot(dx, dy) <= COINCIDENT_TOL:
        raise DegenerateConfiguration("coincident vehicles: zeroth-order row vanishes")
    return dx, dy


# Lie-derivative scalars of h = |p_i - p_j|^2 / 2 over the pair state
# s = (x_i, y_i, th_i, x_j, y_j, th_j). Used by the finite-difference checks.

def lie_h0(s):
    return 0.5 * ((s[0] - s[3]) ** 2 + (s[1] - s[4]) ** 2)


def lie_vi(s):
    return math.cos(s[2]) * (s[0] - s[3]) + math.sin(s[2]) * (s[1] - s[4])


def lie_vj(s):
    return -math.cos(s[5]) * (s[0] - s[3]) - math.sin(s[5]) * (s[1] - s[4])


def lie_vi_vj(s):
    return -math.cos(s[2] - s[5])


def lie_vi_wi(s):
    return -(math.sin(s[2]) * (s[0] - s[3]) - math.cos(s[2]) * (s[1] - s[4]))


def lie_vj_wj(s):
    return math.sin(s[5]) * (s[0] - s[3]) - math.cos(s[5]) * (s[1] - s[4])


def lie_vi_vj_wi(s):
    return math.sin(s[2] - s[5])


def lie_vi_wi_wi(s):
    return -(math.cos(s[2]) * (s[0] - s[3]) + math.sin(s[2]) * (s[1] - s[4]))


def lie_vj_wj_wj(s):
    return math.cos(s[5]) * (s[0] - s[3]) + math.sin(s[5]) * (s[1] - s[4])


#: label -> scalar Lie derivative on the 6-dim pair state
PAIR_LIE_DERIVATIVES: dict[str, Callable] = {
    "L0": lie_h0,
    "L1[v_i]": lie_vi,
    "L1[v_j]": lie_vj,
    "L2[v_i,v_j]": lie_vi_vj,
    "L2[v_i,w_i]": lie_vi_wi,
    "L2[v_j,w_j]": lie_vj_wj,
    "L3[v_i,v_j,w_i]": lie_vi_vj_wi,
    "L3[v_i,w_i,w_i]": lie_vi_wi_wi,
    "L3[v_j,w_j,w_j]": lie_vj_wj_wj,
}


def _anchor_state(fn):
    # anchor state s = (x_i, y_i, th_i); the anchor position is bound in a closure
    def make(pk):
        return lambda s: fn((s[0], s[1], s[2], pk[0], pk[1], 0.0))
    return make


#: label -> factory(pk) -> scalar Lie derivative on the 3-dim dynamic state
ANCHOR_LIE_DERIVATIVES: dict[str, Callable] = {
    "L0": _anchor_state(lie_h0),
    "L1[v_i]": _anchor_state(lie_vi),
    "L2[v_i,w_i]": _anchor_state(lie_vi_wi),
    "L3[v_i,w_i,w_i]": _anchor_state(lie_vi_wi_wi),
}


def pair_gradients(xi: VehicleState, xj: VehicleState) -> dict[str, np.ndarray]:
    """Analytic gradients of every non-zero pair Lie derivative, keyed by label."""
    dx, dy = xi.x - xj.x, xi.y - xj.y
    ci, si = math.cos(xi.heading), math.sin(xi.heading)
    cj, sj = math.cos(xj.heading), math.sin(xj.heading)
    di_m = si * dx - ci * dy
    di_p = ci * dx + si * dy
    dj_m = sj * dx - cj * dy
    dj_p = cj * dx + sj * dy
    sij = math.sin(xi.heading - xj.heading)
    cij = math.cos(xi.heading - xj.heading)
    return {
        "L0": np.array([dx, dy, 0.0, -dx, -dy, 0.0]),
        "L1[v_i]": np.array([ci, si, -di_m, -ci, -si, 0.0]),
        "L1[v_j]": np.array([-cj, -sj, 0.0, cj, sj, dj_m]),
        "L2[v_i,v_j]": np.array([0.0, 0.0, sij, 0.0, 0.0, -sij]),
        "L2[v_i,w_i]": np.array([-si, ci, -di_p, si, -ci, 0.0]),
        "L2[v_j,w_j]": np.array([sj, -cj, 0.0, -sj, cj, dj_p]),
        "L3[v_i,v_j,w_i]": np.array([0.0, 0.0, cij, 0.0, 0.0, -cij]),
        "L3[v_i,w_i,w_i]": np.array([-ci, -si, di_m, ci, si, 0.0]),
        "L3[v_j,w_j,w_j]": np.array([cj, sj, 0.0, -cj, -sj, -dj_m]),
    }


def anchor_gradients(xi: VehicleState, pk) -> dict[str, np.ndarray]:
    """Analytic gradients of the dynamic-to-anchor Lie derivatives, keyed by label."""
    full = pair_gradients(xi, VehicleState(float(pk[0]), float(pk[1]), 0.0))
    return {label: full[label][:3] for label in ANCHOR_LIE_DERIVATIVES}


def pair_matrix_dynamic(xi: VehicleState, xj: VehicleState) -> ObservabilityMatrix:
    """7x6 observability matrix of two moving vehicles ranging to each other."""
    _deltas(xi.position, xj.position)
    grads = pair_gradients(xi, xj)
    rows = np.vstack([grads[label] for label in PAIR_ROW_LABELS])
    return ObservabilityMatrix(rows, list(PAIR_ROW_LABELS), n_dynamic=2, dynamic_ids=(0, 1))


def pair_matrix_anchor(xi: VehicleState, pk) -> ObservabilityMatrix:
    """3x3 observability matrix of one moving vehicle ranging to a known static position."""
    _deltas(xi.position, pk)
    grads = anchor_gradients(xi, pk)
    rows = np.vstack([grads[label] for label in ANCHOR_ROW_LABELS])
    return ObservabilityMatrix(rows, list(ANCHOR_ROW_LABELS), n_dynamic=1, dynamic_ids=(0,), anchor_ids=(1,))


def _connected(nodes, edges) -> bool:
    nodes = list(nodes)
    if not nodes:
        return True
    adj = {n: set() for n in nodes}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        for m in adj[stack.pop()]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return len(seen) == len(nodes)


def fleet_matrix(states: Sequence[VehicleState], static_set=(), edges=None) -> ObservabilityMatrix:
    """Stack pair blocks for a fleet.

    Parameters
    ----------
    states : sequence of VehicleState
        Pose of every vehicle; a vehicle's id is its index in this sequence.
    static_set : iterable of int
        Ids of static vehicles whose positions are known. They contribute no
        columns; their headings are ignored.
    edges : iterable of (int, int), optional
        Measured pairs. Defaults to the complete graph. Static-static edges
        carry no information about the dynamic states and are skipped.

    Returns
    -------
    ObservabilityMatrix
        Columns cover the dynamic vehicles in increasing id order, three per
        vehicle. ``connected`` is False (with a warning) if the measurement
        graph does not connect the fleet.
    """
    n_total = len(states)
    static = sorted(set(static_set))
    if any(k < 0 or k >= n_total for k in static):
        raise InvalidArgument("static id out of range")
    dynamic = [k for k in range(n_total) if k not in static]
    if not dynamic:
        raise InvalidArgument("no dynamic vehicle in the fleet")
    col = {vid: 3 * c for c, vid in enumerate(dynamic)}
    all_pairs = list(itertools.combinations(range(n_total), 2))
    if edges is None:
        edges = all_pairs
    edges = [tuple(sorted(e)) for e in edges]
    for a, b in edges:
        if a == b or not (0 <= a < n_total and 0 <= b < n_total):
            raise InvalidArgument(f"invalid edge {(a, b)}")
    edge_set = set(edges)
    used_anchors = sorted({k for e in edge_set for k in e if k in static})
    considered = dynamic + used_anchors
    complete = all(tuple(sorted(p)) in edge_set or (p[0] in static and p[1] in static)
                   for p in itertools.combinations(considered, 2))

    blocks, labels = [], []
    ncols = 3 * len(dynamic)
    for a, b in sorted(edge_set):
        if a in static and b in static:
            continue
        if a in static or b in static:
            i, k = (b, a) if a in static else (a, b)
            block = pair_matrix_anchor(states[i], states[k].position).entries
            rows = np.zeros((block.shape[0], ncols))
            rows[:, col[i]:col[i] + 3] = block
            labels += [f"({i},{k}*) {lab}" for lab in ANCHOR_ROW_LABELS]
        else:
            block = pair_matrix_dynamic(states[a], states[b]).entries
            rows = np.zeros((block.shape[0], ncols))
            rows[:, col[a]:col[a] + 3] = block[:, :3]
            rows[:, col[b]:col[b] + 3] = block[:, 3:]
            labels += [f"({a},{b}) {lab}" for lab in PAIR_ROW_LABELS]
        blocks.append(rows)

    warnings = []
    connected = _connected(considered, [e for e in edge_set if not (e[0] in static and e[1] in static)])
    if not connected:
        warnings.append("measurement graph does not connect the fleet")
    if not blocks:
        warnings.append("no informative edges")
        blocks.append(np.zeros((1, ncols)))
        labels.append("empty")
    # degenerate geometry is reported, not rejected: the rank drop is the informative output
    headings = [states[k].heading for k in dynamic]
    if len(dynamic) >= 2 and max(headings) - min(headings) < 1e-12:
        warnings.append("all dynamic headings equal")
    pos = np.array([states[k].position for k in considered])
    if len(pos) >= 3:
        sv = np.linalg.svd(pos - pos.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            warnings.append("collinear fleet")
    for w in warnings:
        logger.warning(w)
    return ObservabilityMatrix(
        np.vstack(blocks), labels, n_dynamic=len(dynamic), dynamic_ids=tuple(dynamic),
        anchor_ids=tuple(used_anchors), complete=complete, connected=connected, warnings=warnings,
    )


def classify(m: ObservabilityMatrix) -> tuple[str | None, int | None]:
    """Regime name and predicted rank for a fleet matrix.

    The prediction is only made for complete, connected measurement graphs.
    """
    n = m.n_dynamic
    anchors = len(m.anchor_ids)
    if n == 0:
        return None, None
    if anchors == 0:
        regime = "dynamic-only-pair" if n == 2 else "dynamic-only-fleet"
        predicted = 3 * (n - 1)
    elif anchors == 1:
        regime, predicted = "one-anchor", 3 * n - 1
    else:
        regime, predicted = "two-anchors", 3 * n
    if not (m.complete and m.connected):
        predicted = None
    return regime, predicted


def numerical_rank(m, rel_tol: float = DEFAULT_REL_TOL) -> RankReport:
    """Rank as the count of singular values above ``rel_tol * sigma_max``."""
    entries = m.entries if isinstance(m, ObservabilityMatrix) else np.atleast_2d(np.asarray(m, dtype=float))
    if entries.size == 0:
        raise InvalidArgument("empty matrix")
    sv = np.linalg.svd(entries, compute_uv=False)
    top = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > rel_tol * top)) if top > 0.0 else 0
    regime, predicted = classify(m) if isinstance(m, ObservabilityMatrix) else (None, None)
    return RankReport(rank=rank, singular_values=[float(s) for s in sv], predicted_rank=predicted,
                      regime=regime, columns=entries.shape[1])


def rref(m, tol: float | None = None):
    """Reduced row echelon form by Gauss-Jordan elimination with partial pivoting.

    ``tol`` is absolute; by default it is ``1e-9`` times the largest entry
    magnitude. Pivot candidates at or below ``tol`` are treated as zero and
    every entry smaller than ``tol`` in the result is flushed to zero.
    Returns the same kind of object it was given.
    """
    is_obs = isinstance(m, ObservabilityMatrix)
    a = (m.entries if is_obs else np.atleast_2d(np.asarray(m, dtype=float))).copy()
    rows, cols = a.shape
    if tol is None:
        tol = 1e-9 * max(np.max(np.abs(a)) if a.size else 0.0, 1e-300)
    r = 0
    for c in range(cols):
        if r == rows:
            break
        p = r + int(np.argmax(np.abs(a[r:, c])))
        if abs(a[p, c]) <= tol:
            a[r:, c] = 0.0
            continue
        if p != r:
            a[[r, p]] = a[[p, r]]
        a[r] /= a[r, c]
        others = np.arange(rows) != r
        a[others] -= np.outer(a[others, c], a[r])
        a[others, c] = 0.0
        r += 1
    a[np.abs(a) < tol] = 0.0
    if is_obs:
        return ObservabilityMatrix(a, [f"rref{k}" for k in range(rows)], n_dynamic=m.n_dynamic,
                                   dynamic_ids=m.dynamic_ids, anchor_ids=m.anchor_ids,
                                   complete=m.complete, connected=m.connected, warnings=list(m.warnings))
    return a


def nonzero_rows(a) -> np.ndarray:
    a = a.entries if isinstance(a, ObservabilityMatrix) else np.asarray(a)
    return a[np.any(a != 0.0, axis=1)]


def gauge_block(pi, pj) -> GaugeBlock:
    """The 3x3 block G_ij paired with the identity in the echelon form of a pair matrix."""
    dx = float(pi[0] - pj[0])
    dy = float(pi[1] - pj[1])
    return GaugeBlock(np.array([[-1.0, 0.0, dy], [0.0, -1.0, -dx], [0.0, 0.0, -1.0]]))


def anchor_gauge_block(pi, pk) -> np.ndarray:
    """2x3 block of the echelon form of a dynamic-to-anchor matrix."""
    dx = float(pi[0] - pk[0])
    dy = float(pi[1] - pk[1])
    return np.array([[1.0, 0.0, dy], [0.0, 1.0, -dx]])
