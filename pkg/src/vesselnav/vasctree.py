"""Synthetic vascular centerline trees.

A tree is a set of labelled branches, each an ordered polyline of centerline
points with a radius per point. Every position on the tree is addressed by an
``ArcPosition`` (branch id, arc length from the branch start). Coordinates are
millimetres with x towards the patient's left, y posterior and z superior.

The anatomy is assembled the same way a CTA-derived one would be: a neck
fragment (arch and great vessels) and a body fragment (femoral access up to the
descending aorta) are generated separately and fused by radius matching.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import GeometryError, ParameterError

LABELS = ("FEMORAL", "ILIAC", "DESC_AORTA", "ARCH", "BCT", "RCCA", "RICA",
          "LCCA", "LICA", "LSA")
BODY_LABELS = ("FEMORAL", "ILIAC", "DESC_AORTA")
NECK_LABELS = ("ARCH", "BCT", "RCCA", "RICA", "LCCA", "LICA", "LSA")
ARCH_TYPES = ("TypeI", "TypeII")

# parent label of every non-root branch in the full anatomy
TOPOLOGY = {
    "ILIAC": "FEMORAL",
    "DESC_AORTA": "ILIAC",
    "ARCH": "DESC_AORTA",
    "LSA": "ARCH",
    "LCCA": "ARCH",
    "BCT": "ARCH",
    "RCCA": "BCT",
    "RICA": "RCCA",
    "LICA": "LCCA",
}

_TOL = 1e-9


@dataclass(frozen=True)
class CenterlinePoint:
    position: Tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.position):
            raise GeometryError("non-finite centerline position")
        if not self.radius > 0:
            raise GeometryError(f"radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class ArcPosition:
    branch: str
    s: float


@dataclass(frozen=True)
class TargetSet:
    branch: str
    train: Tuple[ArcPosition, ...]
    eval: Tuple[ArcPosition, ...]

    @property
    def all(self) -> Tuple[ArcPosition, ...]:
        return self.train + self.eval


class Branch:
    """One vessel segment: points ordered away from the insertion site."""

    def __init__(self, id: str, label: str, positions, radii,
                 parent: Optional[Tuple[str, int]] = None,
                 takeoff_angle: float = 0.0):
        positions = np.array(positions, dtype=float).reshape(-1, 3)
        radii = np.array(radii, dtype=float).reshape(-1)
        if label not in LABELS:
            raise GeometryError(f"unknown branch label {label!r}")
        if len(positions) < 2:
            raise GeometryError(f"branch {id} needs at least 2 points")
        if len(radii) != len(positions):
            raise GeometryError(f"branch {id}: {len(radii)} radii for {len(positions)} points")
        if not np.all(np.isfinite(positions)):
            raise GeometryError(f"branch {id}: non-finite position")
        if not np.all(radii > 0):
            raise GeometryError(f"branch {id}: radius must be > 0")
        seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        if not np.all(seg > 0):
            raise GeometryError(f"branch {id}: consecutive points coincide")
        if not 0.0 <= takeoff_angle <= 180.0:
            raise GeometryError(f"branch {id}: takeoff angle {takeoff_angle} outside [0, 180]")
        self.id = id
        self.label = label
        self.positions = positions
        self.radii = radii
        self.parent = None if parent is None else (str(parent[0]), int(parent[1]))
        self.takeoff_angle = float(takeoff_angle)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.seg = seg

    def __repr__(self):
        return (f"Branch({self.id!r}, {self.label}, n={len(self.radii)}, "
                f"length={self.length:.1f}, parent={self.parent})")

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point(self, i: int) -> CenterlinePoint:
        return CenterlinePoint(tuple(self.positions[i]), float(self.radii[i]))

    def _locate(self, s: float) -> Tuple[int, float]:
        i = int(np.searchsorted(self.s, s, side="right")) - 1
        i = min(max(i, 0), len(self.seg) - 1)
        return i, (s - self.s[i]) / self.seg[i]

    def point_at(self, s: float) -> np.ndarray:
        i, f = self._locate(s)
        return self.positions[i] + f * (self.positions[i + 1] - self.positions[i])

    def radius_at(self, s: float) -> float:
        i, f = self._locate(s)
        return float(self.radii[i] + f * (self.radii[i + 1] - self.radii[i]))

    def tangent_at(self, s: float) -> np.ndarray:
        i, _ = self._locate(s)
        d = self.positions[i + 1] - self.positions[i]
        return d / self.seg[i]


class VascTree:
    """Directed centerline tree rooted at the femoral insertion site."""

    def __init__(self, branches: Dict[str, Branch], root: str,
                 arch_type: str = "TypeI", validate: bool = True):
        self.branches = dict(branches)
        self.root = root
        self.arch_type = arch_type
        self._children: Dict[str, List[str]] = {b: [] for b in self.branches}
        for b in self.branches.values():
            if b.parent is not None and b.parent[0] in self._children:
                self._children[b.parent[0]].append(b.id)
        for kids in self._children.values():
            kids.sort(key=lambda c: (self.branches[c].parent[1], c))
        if validate:
            self.validate()
        self._lineage: Dict[str, Tuple[str, ...]] = {}
        self._offset: Dict[str, float] = {}
        self._orientation: Dict[str, float] = {}
        self._attach: Dict[str, float] = {}
        for bid in self._walk():
            b = self.branches[bid]
            if b.parent is None:
                self._lineage[bid] = (bid,)
                self._offset[bid] = 0.0
            else:
                pid, idx = b.parent
                self._lineage[bid] = self._lineage[pid] + (bid,)
                self._offset[bid] = self._offset[pid] + float(self.branches[pid].s[idx])

    def __repr__(self):
        return f"VascTree(root={self.root!r}, arch={self.arch_type}, branches={list(self.branches)})"

    def _walk(self) -> List[str]:
        order, stack = [], [self.root]
        while stack:
            bid = stack.pop()
            order.append(bid)
            stack.extend(reversed(self._children[bid]))
        return order

    def validate(self, complete: bool = False) -> None:
        if self.root not in self.branches:
            raise GeometryError(f"root {self.root!r} missing")
        if self.arch_type not in ARCH_TYPES:
            raise GeometryError(f"unknown arch type {self.arch_type!r}")
        roots = [b.id for b in self.branches.values() if b.parent is None]
        if roots != [self.root]:
            raise GeometryError(f"expected exactly one root {self.root!r}, found {roots}")
        for b in self.branches.values():
            if b.parent is None:
                continue
            pid, idx = b.parent
            if pid not in self.branches:
                raise GeometryError(f"branch {b.id}: parent {pid!r} missing")
            parent = self.branches[pid]
            if not 0 <= idx < len(parent.radii):
                raise GeometryError(f"branch {b.id}: attachment index {idx} out of range")
            if np.linalg.norm(b.positions[0] - parent.positions[idx]) > 1e-6:
                raise GeometryError(f"branch {b.id} does not start at its attachment point")
        seen = self._walk()
        if len(seen) != len(self.branches) or len(set(seen)) != len(seen):
            raise GeometryError("tree is disconnected or cyclic")
        if complete:
            labels = {b.label: b.id for b in self.branches.values()}
            missing = set(LABELS) - set(labels)
            if missing:
                raise GeometryError(f"missing labelled branches: {sorted(missing)}")
            if self.branches[self.root].label != "FEMORAL":
                raise GeometryError("root must be the FEMORAL branch")
            for child, parent in TOPOLOGY.items():
                cp = self.branches[labels[child]].parent
                if cp is None or self.branches[cp[0]].label != parent:
                    raise GeometryError(f"{child} must hang off {parent}")

    # -- lookups ---------------------------------------------------------
    def by_label(self, label: str) -> Branch:
        for b in self.branches.values():
            if b.label == label:
                return b
        raise GeometryError(f"no branch labelled {label}")

    def children(self, bid: str) -> List[str]:
        return list(self._children[bid])

    def lineage(self, bid: str) -> Tuple[str, ...]:
        return self._lineage[bid]

    def attach_s(self, bid: str) -> float:
        """Arc position of a child's origin on its parent branch."""
        if bid not in self._attach:
            pid, idx = self.branches[bid].parent
            self._attach[bid] = float(self.branches[pid].s[idx])
        return self._attach[bid]

    def offset(self, bid: str) -> float:
        return self._offset[bid]

    @property
    def insertion(self) -> ArcPosition:
        return ArcPosition(self.root, 0.0)

    def check(self, pos: ArcPosition) -> ArcPosition:
        b = self.branches.get(pos.branch)
        if b is None:
            raise GeometryError(f"unknown branch {pos.branch!r}")
        if not (-_TOL <= pos.s <= b.length + _TOL) or not math.isfinite(pos.s):
            raise GeometryError(f"arc position {pos.s} outside [0, {b.length}] on {pos.branch}")
        return pos

    def position(self, pos: ArcPosition) -> np.ndarray:
        return self.branches[pos.branch].point_at(pos.s)

    def radius(self, pos: ArcPosition) -> float:
        return self.branches[pos.branch].radius_at(pos.s)

    def root_distance(self, pos: ArcPosition) -> float:
        return self._offset[pos.branch] + pos.s

    def all_points(self) -> np.ndarray:
        return np.concatenate([b.positions for b in self.branches.values()])

    def orientation(self, bid: str) -> float:
        """Azimuth of a branch's initial direction around its parent's tangent, degrees."""
        if bid not in self._orientation:
            b = self.branches[bid]
            if b.parent is None:
                self._orientation[bid] = 0.0
            else:
                pid, idx = b.parent
                t = _incoming_tangent(self.branches[pid], idx)
                d = b.positions[1] - b.positions[0]
                self._orientation[bid] = _azimuth(t, d / np.linalg.norm(d))
        return self._orientation[bid]


def _incoming_tangent(parent: Branch, idx: int) -> np.ndarray:
    if idx == 0:
        d = parent.positions[1] - parent.positions[0]
    else:
        d = parent.positions[idx] - parent.positions[idx - 1]
    return d / np.linalg.norm(d)


def _frame(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0])
    e1 = ref - ref.dot(t) * t
    if np.linalg.norm(e1) < 1e-6:
        ref = np.array([1.0, 0.0, 0.0])
        e1 = ref - ref.dot(t) * t
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(t, e1)


def _azimuth(t: np.ndarray, d: np.ndarray) -> float:
    e1, e2 = _frame(t)
    perp = d - d.dot(t) * t
    if np.linalg.norm(perp) < 1e-9:
        return 0.0
    return math.degrees(math.atan2(perp.dot(e2), perp.dot(e1))) % 360.0


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def takeoff_angle(parent: Branch, idx: int, positions: np.ndarray) -> float:
    """Angle between a child's initial tangent and the parent tangent at the attachment."""
    return _angle(_incoming_tangent(parent, idx), positions[1] - positions[0])


def _rebuild(tree: VascTree, positions: Dict[str, np.ndarray],
             radii: Dict[str, np.ndarray], recompute_angles: bool = True) -> VascTree:
    out: Dict[str, Branch] = {}
    for bid in tree._walk():
        b = tree.branches[bid]
        angle = b.takeoff_angle
        if b.parent is not None and recompute_angles:
            pid, idx = b.parent
            pb = out[pid]
            angle = takeoff_angle(pb, idx, positions[bid])
        out[bid] = Branch(bid, b.label, positions[bid], radii[bid], b.parent, angle)
    return VascTree(out, tree.root, tree.arch_type)


# ---------------------------------------------------------------------------
# path metrics
# ---------------------------------------------------------------------------

def _meet(tree: VascTree, a: ArcPosition, b: ArcPosition) -> ArcPosition:
    la, lb = tree.lineage(a.branch), tree.lineage(b.branch)
    k = 0
    while k < min(len(la), len(lb)) and la[k] == lb[k]:
        k += 1
    common = la[k - 1]
    sa = a.s if a.branch == common else tree.attach_s(la[k])
    sb = b.s if b.branch == common else tree.attach_s(lb[k])
    return ArcPosition(common, min(sa, sb))


def meet_point(tree: VascTree, a: ArcPosition, b: ArcPosition) -> ArcPosition:
    """Point where the tree paths from the root to ``a`` and ``b`` diverge."""
    return _meet(tree, tree.check(a), tree.check(b))


def pathlength(tree: VascTree, a: ArcPosition, b: ArcPosition) -> float:
    """Length of the unique centerline path between two positions, mm."""
    tree.check(a)
    tree.check(b)
    if a.branch == b.branch:
        return abs(a.s - b.s)
    m = _meet(tree, a, b)
    d = tree.root_distance(a) + tree.root_distance(b) - 2.0 * tree.root_distance(m)
    return max(d, 0.0)


def tortuosity(tree: VascTree, a: ArcPosition, b: ArcPosition) -> float:
    """Centerline path length divided by the straight-line distance."""
    chord = float(np.linalg.norm(tree.position(tree.check(a)) - tree.position(tree.check(b))))
    if chord <= 1e-12:
        raise GeometryError("tortuosity undefined for coincident endpoints")
    return pathlength(tree, a, b) / chord


def chain_tortuosity(tree: VascTree, side: str = "R") -> float:
    """Tortuosity from the common carotid origin to the internal carotid end."""
    cca, ica = ("RCCA", "RICA") if side == "R" else ("LCCA", "LICA")
    ica_b = tree.by_label(ica)
    return tortuosity(tree, ArcPosition(tree.by_label(cca).id, 0.0),
                      ArcPosition(ica_b.id, ica_b.length))


def position_along_path(tree: VascTree, tip: ArcPosition, distance: float) -> ArcPosition:
    """Position at ``distance`` mm from the root on the root-to-tip path."""
    lineage = tree.lineage(tip.branch)
    distance = max(0.0, min(distance, tree.root_distance(tip)))
    for bid in reversed(lineage):
        start = tree.offset(bid)
        if distance >= start - 1e-12:
            return ArcPosition(bid, min(max(distance - start, 0.0), tree.branches[bid].length))
    return ArcPosition(tree.root, 0.0)


def sample_targets(tree: VascTree, branch: str, seed: int,
                   n: int = 20, margin_mm: float = 10.0) -> TargetSet:
    """Twenty stratified positions on one branch, split 10 train / 10 eval.

    Each point is drawn inside its own arc bin so the points are distinct and
    spread over the branch; the split is a seeded permutation.
    """
    if branch not in tree.branches:
        raise GeometryError(f"unknown branch {branch!r}")
    b = tree.branches[branch]
    if b.length < n * float(b.seg.min()):
        raise GeometryError(f"branch {branch} too short for {n} targets ({b.length:.2f} mm)")
    rng = np.random.default_rng(seed)
    margin = min(margin_mm, 0.1 * b.length)
    edges = np.linspace(margin, b.length - margin, n + 1)
    s = edges[:-1] + rng.uniform(0.1, 0.9, n) * np.diff(edges)
    perm = rng.permutation(n)
    half = n // 2
    train = tuple(ArcPosition(branch, float(v)) for v in np.sort(s[perm[:half]]))
    ev = tuple(ArcPosition(branch, float(v)) for v in np.sort(s[perm[half:]]))
    return TargetSet(branch, train, ev)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

Range = Tuple[float, float]


@dataclass
class AnatomyParams:
    """Ranges every synthetic anatomy is drawn from.

    Angles named ``*_acute_deg`` are measured between the branch and the arch
    on the side the wire arrives from; smaller is more acute and harder to
    enter. The branch ``takeoff_angle`` is 180 minus this value.
    """
    p_type1: float = 0.8
    spacing_mm: float = 0.8
    lengths: Dict[str, Range] = field(default_factory=lambda: {
        "FEMORAL": (60.0, 75.0),
        "ILIAC": (70.0, 85.0),
        "DESC_AORTA": (190.0, 230.0),
        "BCT": (30.0, 42.0),
        "RCCA": (85.0, 105.0),
        "RICA": (55.0, 70.0),
        "LCCA": (95.0, 115.0),
        "LICA": (55.0, 70.0),
        "LSA": (40.0, 55.0),
        "ASCENDING": (30.0, 40.0),
    })
    radii: Dict[str, Range] = field(default_factory=lambda: {
        "FEMORAL": (3.6, 4.4),
        "ILIAC": (4.6, 5.4),
        "DESC_AORTA": (7.0, 8.5),
        "BODY_TOP": (8.5, 10.5),
        "ARCH": (10.0, 12.0),
        "BCT": (5.5, 6.5),
        "RCCA": (3.6, 4.2),
        "RICA": (2.9, 3.3),
        "LCCA": (3.4, 4.0),
        "LICA": (2.8, 3.2),
        "LSA": (4.0, 4.8),
    })
    taper: Dict[str, float] = field(default_factory=lambda: {
        "FEMORAL": 1.15, "ILIAC": 1.15, "ARCH": 1.2, "BCT": 0.85,
        "RCCA": 0.9, "RICA": 0.95, "LCCA": 0.9, "LICA": 0.95, "LSA": 0.85,
    })
    arch_radius_mm: Range = (26.0, 32.0)
    arch_obliquity_mm: Range = (10.0, 20.0)
    bct_acute_deg: Range = (60.0, 90.0)
    lcca_acute_deg: Range = (35.0, 60.0)
    lsa_acute_deg: Range = (55.0, 80.0)
    out_of_plane_deg: Range = (-12.0, 12.0)
    # origin positions on the arch as a fraction of the half turn
    origins_type1: Dict[str, Range] = field(default_factory=lambda: {
        "LSA": (0.30, 0.36), "LCCA": (0.45, 0.51), "BCT": (0.60, 0.66)})
    origins_type2: Dict[str, Range] = field(default_factory=lambda: {
        "LSA": (0.38, 0.44), "LCCA": (0.62, 0.67), "BCT": (0.72, 0.78)})
    wiggle_amp_mm: Dict[str, Range] = field(default_factory=lambda: {
        "FEMORAL": (0.5, 1.5), "ILIAC": (1.0, 2.5), "DESC_AORTA": (1.0, 3.0),
        "BCT": (0.3, 1.0), "RCCA": (3.0, 7.5), "RICA": (3.5, 8.5),
        "LCCA": (2.5, 6.0), "LICA": (3.0, 7.0), "LSA": (0.5, 1.5),
    })
    wavelength_mm: Range = (32.0, 44.0)

    def validate(self) -> None:
        if not 0.0 <= self.p_type1 <= 1.0:
            raise ParameterError("p_type1 must lie in [0, 1]")
        if not 0.0 < self.spacing_mm <= 1.0:
            raise ParameterError("centerline spacing must be in (0, 1] mm")
        ranges = dict(self.lengths)
        ranges.update({f"radius {k}": v for k, v in self.radii.items()})
        ranges.update(arch_radius=self.arch_radius_mm, bct=self.bct_acute_deg,
                      lcca=self.lcca_acute_deg, lsa=self.lsa_acute_deg,
                      wavelength=self.wavelength_mm)
        for name, (lo, hi) in ranges.items():
            if not lo <= hi:
                raise ParameterError(f"{name}: empty range ({lo}, {hi})")
        for k, (lo, _) in self.radii.items():
            if lo <= 0:
                raise ParameterError(f"minimum radius of {k} must be > 0")
        for k in ("FEMORAL", "ILIAC", "DESC_AORTA", "BCT", "RCCA", "RICA", "LCCA", "LICA", "LSA"):
            if self.lengths[k][0] <= 5.0:
                raise ParameterError(f"{k} minimum length must exceed 5 mm")
        if any(t <= 0 for t in self.taper.values()):
            raise ParameterError("taper ratios must be > 0")
        if self.lcca_acute_deg[1] > self.bct_acute_deg[0] or \
                self.lcca_acute_deg[0] >= self.bct_acute_deg[0]:
            raise ParameterError("LCCA angle range must be strictly more acute than the right side")
        for lo, hi in (self.bct_acute_deg, self.lcca_acute_deg, self.lsa_acute_deg):
            if lo <= 0 or hi >= 180:
                raise ParameterError("branch angles must lie in (0, 180)")
        for table in (self.origins_type1, self.origins_type2):
            for lo, hi in table.values():
                if not 0.05 <= lo <= hi <= 0.95:
                    raise ParameterError("arch origins must lie inside the arch")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AnatomyParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown anatomy parameters: {sorted(unknown)}")
        base = cls()
        kw = {}
        for k, v in d.items():
            cur = getattr(base, k)
            if isinstance(cur, dict):
                merged = dict(cur)
                merged.update({kk: tuple(vv) if isinstance(vv, (list, tuple)) else vv
                               for kk, vv in v.items()})
                kw[k] = merged
            elif isinstance(cur, tuple):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)


def _u(rng: np.random.Generator, r: Range) -> float:
    return float(rng.uniform(r[0], r[1]))


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    om = math.acos(min(1.0, max(-1.0, float(a.dot(b)))))
    if om < 1e-9:
        return a.copy()
    return (math.sin((1 - t) * om) * a + math.sin(t * om) * b) / math.sin(om)


def _resample(points: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-12])
    points = points[keep]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    n = max(2, int(math.ceil(s[-1] / spacing)) + 1)
    target = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(target, s, points[:, k]) for k in range(3)], axis=1)


def _spline_polyline(ctrl: np.ndarray, spacing: float) -> np.ndarray:
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))])
    cs = CubicSpline(chord, ctrl, axis=0)
    fine = cs(np.linspace(0.0, chord[-1], max(50, int(chord[-1] / spacing) * 8)))
    return _resample(fine, spacing)


def _branch_curve(rng, start, d0, goal, length, bend_mm, amp, wavelength, spacing):
    """Piecewise-cubic centerline leaving ``start`` along ``d0`` and turning to ``goal``.

    A lateral sinusoid ramped in from zero adds tortuosity without changing
    the initial direction.
    """
    d0, goal = _unit(d0), _unit(goal)
    step = 4.0
    n = max(4, int(math.ceil(length / step)) + 1)
    ss = np.linspace(0.0, length, n)
    heading = [d0]
    pts = [np.asarray(start, dtype=float)]
    for k in range(1, n):
        h = _slerp(d0, goal, min(1.0, ss[k] / bend_mm))
        pts.append(pts[-1] + (ss[k] - ss[k - 1]) * 0.5 * (h + heading[-1]))
        heading.append(h)
    pts = np.array(pts)
    u = np.cross(goal, [0.0, 1.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(goal, [1.0, 0.0, 0.0])
    u = _unit(u)
    v = np.cross(goal, u)
    ph1, ph2 = rng.uniform(0, 2 * math.pi, 2)
    ratio = rng.uniform(1.3, 1.7)
    ramp = np.clip((ss - 6.0) / 14.0, 0.0, 1.0) ** 2
    off = ramp[:, None] * amp * (np.sin(2 * math.pi * ss / wavelength + ph1)[:, None] * u
                                 + 0.6 * np.sin(2 * math.pi * ss / (wavelength * ratio) + ph2)[:, None] * v)
    pts = pts + off
    return _spline_polyline(pts, spacing)


def _taper(n: int, r0: float, ratio: float) -> np.ndarray:
    return np.linspace(r0, r0 * ratio, n)


def _make_branch(bid, positions, radii, parent_branch: Optional[Branch] = None, idx: int = 0):
    if parent_branch is None:
        return Branch(bid, bid, positions, radii)
    positions = positions.copy()
    positions[0] = parent_branch.positions[idx]
    ang = takeoff_angle(parent_branch, idx, positions)
    return Branch(bid, bid, positions, radii, (parent_branch.id, idx), ang)


def generate_body(params: AnatomyParams, rng: np.random.Generator) -> VascTree:
    """Femoral access, iliac and descending aorta in their own frame and scale."""
    p, sp = params, params.spacing_mm
    lam = lambda: _u(rng, p.wavelength_mm)
    fem_pts = _branch_curve(rng, [-70.0, 0.0, 0.0], [0.1, 0.0, 1.0], [0.35, 0.05, 1.0],
                            _u(rng, p.lengths["FEMORAL"]), 30.0,
                            _u(rng, p.wiggle_amp_mm["FEMORAL"]), lam(), sp)
    r0 = _u(rng, p.radii["FEMORAL"])
    fem = _make_branch("FEMORAL", fem_pts, _taper(len(fem_pts), r0, p.taper["FEMORAL"]))
    d = fem_pts[-1] - fem_pts[-2]
    il_pts = _branch_curve(rng, fem_pts[-1], d, [0.55, 0.1, 1.0],
                           _u(rng, p.lengths["ILIAC"]), 25.0,
                           _u(rng, p.wiggle_amp_mm["ILIAC"]), lam(), sp)
    r0 = _u(rng, p.radii["ILIAC"])
    il = _make_branch("ILIAC", il_pts, _taper(len(il_pts), r0, p.taper["ILIAC"]), fem, len(fem_pts) - 1)
    d = il_pts[-1] - il_pts[-2]
    ao_pts = _branch_curve(rng, il_pts[-1], d, [0.04, 0.12, 1.0],
                           _u(rng, p.lengths["DESC_AORTA"]), 40.0,
                           _u(rng, p.wiggle_amp_mm["DESC_AORTA"]), 2.5 * lam(), sp)
    r_bottom = _u(rng, p.radii["DESC_AORTA"])
    r_top = _u(rng, p.radii["BODY_TOP"])
    ao = _make_branch("DESC_AORTA", ao_pts, np.linspace(r_bottom, r_top, len(ao_pts)),
                      il, len(il_pts) - 1)
    return VascTree({b.id: b for b in (fem, il, ao)}, "FEMORAL", validate=True)


def _arch_centerline(rng, p: AnatomyParams) -> Tuple[np.ndarray, float, float]:
    R = _u(rng, p.arch_radius_mm)
    obl = _u(rng, p.arch_obliquity_mm)
    phi = np.linspace(0.0, math.pi, 400)
    x = -R + R * np.cos(phi)
    y = -obl * (1.0 - np.cos(phi)) / 2.0
    z = R * np.sin(phi)
    arc = np.stack([x, y, z], axis=1)
    asc = _u(rng, p.lengths["ASCENDING"])
    tail = arc[-1] + np.outer(np.linspace(0.0, asc, 60)[1:], [0.0, 0.0, -1.0])
    return _resample(np.concatenate([arc, tail]), p.spacing_mm), R, obl


def generate_neck(params: AnatomyParams, rng: np.random.Generator,
                  arch_type: str) -> VascTree:
    """Arch with LSA, LCCA and BCT origins and both carotid chains, inlet at the origin."""
    p, sp = params, params.spacing_mm
    lam = lambda: _u(rng, p.wavelength_mm)
    arch_pts, R, obl = _arch_centerline(rng, p)
    r_in = _u(rng, p.radii["ARCH"])
    arch = Branch("ARCH", "ARCH", arch_pts, _taper(len(arch_pts), r_in, p.taper["ARCH"]))
    origins = p.origins_type1 if arch_type == "TypeI" else p.origins_type2
    acute = {"LSA": p.lsa_acute_deg, "LCCA": p.lcca_acute_deg, "BCT": p.bct_acute_deg}
    goals = {"LSA": [1.0, 0.0, 0.35], "LCCA": [0.08, 0.0, 1.0], "BCT": [-0.35, 0.0, 1.0]}
    branches = {"ARCH": arch}
    for label in ("LSA", "LCCA", "BCT"):
        phi = math.pi * _u(rng, origins[label])
        target = np.array([-R + R * math.cos(phi), -obl * (1 - math.cos(phi)) / 2, R * math.sin(phi)])
        idx = int(np.argmin(np.linalg.norm(arch_pts - target, axis=1)))
        idx = min(max(idx, 1), len(arch_pts) - 2)
        t = _incoming_tangent(arch, idx)
        centre = np.array([-R, arch_pts[idx, 1], 0.0])
        n = arch_pts[idx] - centre
        n = _unit(n - n.dot(t) * t)
        b = np.cross(t, n)
        take = math.radians(180.0 - _u(rng, acute[label]))
        az = math.radians(_u(rng, p.out_of_plane_deg))
        d0 = math.cos(take) * t + math.sin(take) * (math.cos(az) * n + math.sin(az) * b)
        length = _u(rng, p.lengths[label])
        pts = _branch_curve(rng, arch_pts[idx], d0, goals[label], length, 18.0,
                            _u(rng, p.wiggle_amp_mm[label]), lam(), sp)
        r0 = _u(rng, p.radii[label])
        branches[label] = _make_branch(label, pts, _taper(len(pts), r0, p.taper[label]), arch, idx)
    for child, parent, goal in (("RCCA", "BCT", [-0.05, 0.0, 1.0]), ("RICA", "RCCA", [0.0, 0.1, 1.0]),
                                ("LICA", "LCCA", [0.0, 0.1, 1.0])):
        pb = branches[parent]
        d = pb.positions[-1] - pb.positions[-2]
        pts = _branch_curve(rng, pb.positions[-1], d, goal, _u(rng, p.lengths[child]), 20.0,
                            _u(rng, p.wiggle_amp_mm[child]), lam(), sp)
        r0 = min(_u(rng, p.radii[child]), float(pb.radii[-1]))
        branches[child] = _make_branch(child, pts, _taper(len(pts), r0, p.taper[child]),
                                       pb, len(pb.positions) - 1)
    return VascTree(branches, "ARCH", arch_type)


def fusion_scale(neck: VascTree, body: VascTree) -> float:
    """Uniform factor that matches the body's top aortic radius to the arch inlet."""
    try:
        r_neck = float(neck.by_label("ARCH").radii[0])
        r_body = float(body.by_label("DESC_AORTA").radii[-1])
    except GeometryError as exc:
        raise GeometryError(f"fragment missing for fusion: {exc}") from None
    if r_neck <= 0 or r_body <= 0:
        raise GeometryError("fusion radii must be positive")
    return r_neck / r_body


def fuse(neck: VascTree, body: VascTree) -> VascTree:
    """Join a neck fragment onto a body fragment.

    The body is scaled uniformly (positions and radii) so the radius at the
    top of its descending aorta equals the arch inlet radius, then translated
    so that point coincides with the arch inlet. The neck is left untouched.
    """
    k = fusion_scale(neck, body)
    arch = neck.by_label("ARCH")
    ao = body.by_label("DESC_AORTA")
    top = ao.positions[-1].copy()
    branches: Dict[str, Branch] = {}
    for bid in body._walk():
        b = body.branches[bid]
        pos = (b.positions - top) * k + arch.positions[0]
        if b.id == ao.id:
            pos[-1] = arch.positions[0]
        parent = b.parent
        if parent is not None:
            pos[0] = branches[parent[0]].positions[parent[1]]
        branches[bid] = Branch(bid, b.label, pos, b.radii * k, parent, b.takeoff_angle)
    ao_new = branches[ao.id]
    idx = len(ao_new.positions) - 1
    for bid in neck._walk():
        b = neck.branches[bid]
        if bid == arch.id:
            ang = takeoff_angle(ao_new, idx, b.positions)
            branches[bid] = Branch(bid, b.label, b.positions, b.radii, (ao.id, idx), ang)
        else:
            branches[bid] = b
    return VascTree(branches, body.root, neck.arch_type)


def _translate(tree: VascTree, shift: np.ndarray) -> VascTree:
    return _rebuild(tree, {k: b.positions + shift for k, b in tree.branches.items()},
                    {k: b.radii for k, b in tree.branches.items()}, recompute_angles=False)


def generate_synthetic(params: Optional[AnatomyParams] = None, seed: int = 0) -> VascTree:
    """Generate a complete labelled anatomy; deterministic in (params, seed)."""
    params = params or AnatomyParams()
    params.validate()
    rng = np.random.default_rng(seed)
    arch_type = "TypeI" if rng.random() < params.p_type1 else "TypeII"
    body = generate_body(params, rng)
    neck = generate_neck(params, rng, arch_type)
    tree = fuse(neck, body)
    # aortic bifurcation on the midline, insertion at z = 0
    ao0 = tree.by_label("DESC_AORTA").positions[0]
    fem0 = tree.by_label("FEMORAL").positions[0]
    tree = _translate(tree, np.array([-ao0[0], -ao0[1], -fem0[2]]))
    tree.validate(complete=True)
    return tree


def _rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    ax, ay, az = (math.radians(v) for v in (rx, ry, rz))
    Rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    Ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    Rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def augment(tree: VascTree, rotation: Optional[Sequence[float]] = None,
            scale_h: Optional[float] = None, scale_w: Optional[float] = None,
            seed: Optional[int] = None, max_rotation: float = 10.0,
            scale_range: Range = (0.7, 1.3)) -> VascTree:
    """Rotate about the centroid, then scale height (z) and width (x, y).

    Unspecified factors are drawn from ``seed`` within the allowed ranges.
    Radii follow the width factor.
    """
    rng = np.random.default_rng(seed)
    if rotation is None:
        rotation = rng.uniform(-max_rotation, max_rotation, 3)
    if scale_h is None:
        scale_h = float(rng.uniform(*scale_range))
    if scale_w is None:
        scale_w = float(rng.uniform(*scale_range))
    rotation = [float(r) for r in rotation]
    if len(rotation) != 3 or any(abs(r) > max_rotation + 1e-12 for r in rotation):
        raise ParameterError(f"rotation must be within +-{max_rotation} deg per axis")
    for sc in (scale_h, scale_w):
        if not scale_range[0] - 1e-12 <= sc <= scale_range[1] + 1e-12:
            raise ParameterError(f"scale {sc} outside {scale_range}")
    centroid = tree.all_points().mean(axis=0)
    R = _rotation_matrix(*rotation)
    S = np.array([scale_w, scale_w, scale_h])
    pos = {k: ((b.positions - centroid) @ R.T) * S + centroid for k, b in tree.branches.items()}
    rad = {k: b.radii * scale_w for k, b in tree.branches.items()}
    return _rebuild(tree, pos, rad)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = "vesselnav-tree 1"


def dumps(tree: VascTree) -> str:
    lines = [f"{_MAGIC} root={tree.root} arch={tree.arch_type} branches={len(tree.branches)}"]
    for bid in tree._walk():
        b = tree.branches[bid]
        pid, idx = b.parent if b.parent is not None else ("-", -1)
        lines.append(f"branch {b.id} {b.label} {pid} {idx} {b.takeoff_angle:.6f} {len(b.radii)}")
        for (x, y, z), r in zip(b.positions, b.radii):
            lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r:.6f}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> VascTree:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_MAGIC):
        raise GeometryError("not a vesselnav tree file")
    head = dict(tok.split("=", 1) for tok in lines[0][len(_MAGIC):].split())
    branches: Dict[str, Branch] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] != "branch" or len(parts) != 7:
            raise GeometryError(f"line {i + 1}: expected branch header")
        _, bid, label, pid, idx, ang, n = parts
        n = int(n)
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n]])
        if rows.shape != (n, 4):
            raise GeometryError(f"branch {bid}: malformed point block")
        parent = None if pid == "-" else (pid, int(idx))
        branches[bid] = Branch(bid, label, rows[:, :3], rows[:, 3], parent, float(ang))
        i += 1 + n
    if len(branches) != int(head.get("branches", len(branches))):
        raise GeometryError("branch count mismatch")
    return VascTree(branches, head["root"], head.get("arch", "TypeI"))


def save_tree(tree: VascTree, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps(tree))


def load_tree(path) -> VascTree:
    with open(path, encoding="ascii") as fh:
        return loads(fh.read())
