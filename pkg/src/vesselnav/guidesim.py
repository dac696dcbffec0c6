"""Quasi-static guidewire + guide catheter kinematics on a centerline tree.

Both devices are described by their inserted length along the tree path from
the insertion site, so advancing is arc-length exact. The only stochastic
element is which vessel the wire tip takes at a side-branch origin: entry
becomes likelier as the wire's angled tip is rotated towards the branch and
when the catheter tip sits close behind the origin.

The observation is what a 2D tip tracker would see: three points on the
distal wire, 2 mm apart, projected onto a fixed coronal plane.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .vasctree import ArcPosition, VascTree, _frame, position_along_path

MAX_ROT_SPEED = 180.0     # deg/s
MAX_TRANS_SPEED = 40.0    # mm/s
DT = 2.0 / 15.0           # s; 200 steps ~ 26.7 s, 1500 steps = 200 s
TIP_OFFSETS = (0.0, 2.0, 4.0)


@dataclass
class SimConfig:
    dt: float = DT
    max_rot_speed: float = MAX_ROT_SPEED
    max_trans_speed: float = MAX_TRANS_SPEED
    wire_length_mm: float = 1800.0
    catheter_length_mm: float = 1250.0
    # branch-entry law
    p_aligned: float = 0.9
    window_deg: float = 60.0
    misalign_scale_deg: float = 8.0
    unsupported_factor: float = 0.6
    support_distance_mm: float = 30.0
    hard_misalign_deg: float = 150.0
    # devices
    catheter_mode: str = "agent"          # agent | frozen | follow
    initial_catheter_gap_mm: float = 30.0
    tip_bend_mm: float = 2.5
    tip_bend_profile: Tuple[float, float, float] = (1.0, 0.4, 0.0)
    history: int = 2
    # observation
    drop_axis: int = 1
    workspace_lo: Tuple[float, float] = (-160.0, -100.0)
    workspace_hi: Tuple[float, float] = (160.0, 800.0)

    def validate(self) -> None:
        if not self.dt > 0:
            raise ConfigurationError("dt must be > 0")
        if self.catheter_mode not in ("agent", "frozen", "follow"):
            raise ConfigurationError(f"unknown catheter_mode {self.catheter_mode!r}")
        if not 0.0 <= self.p_aligned <= 1.0 or not 0.0 <= self.unsupported_factor <= 1.0:
            raise ConfigurationError("probabilities must lie in [0, 1]")
        if self.misalign_scale_deg <= 0:
            raise ConfigurationError("misalign_scale_deg must be > 0")
        if self.drop_axis not in (0, 1, 2):
            raise ConfigurationError("drop_axis must be 0, 1 or 2")
        if any(h <= l for l, h in zip(self.workspace_lo, self.workspace_hi)):
            raise ConfigurationError("empty workspace")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ActionCommand:
    """Proximal speeds for both devices; clamped to the device limits on construction."""
    wire_rot_speed: float = 0.0
    wire_trans_speed: float = 0.0
    cath_rot_speed: float = 0.0
    cath_trans_speed: float = 0.0

    def __post_init__(self):
        for name, lim in (("wire_rot_speed", MAX_ROT_SPEED), ("wire_trans_speed", MAX_TRANS_SPEED),
                          ("cath_rot_speed", MAX_ROT_SPEED), ("cath_trans_speed", MAX_TRANS_SPEED)):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                v = 0.0
            object.__setattr__(self, name, min(lim, max(-lim, v)))

    def as_array(self) -> np.ndarray:
        return np.array([self.wire_rot_speed, self.wire_trans_speed,
                         self.cath_rot_speed, self.cath_trans_speed])

    def normalized(self) -> np.ndarray:
        return self.as_array() / np.array([MAX_ROT_SPEED, MAX_TRANS_SPEED,
                                           MAX_ROT_SPEED, MAX_TRANS_SPEED])

    @classmethod
    def from_unit(cls, u: Sequence[float]) -> "ActionCommand":
        """Map components in [-1, 1] affinely onto the physical speed ranges."""
        u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
        return cls(u[0] * MAX_ROT_SPEED, u[1] * MAX_TRANS_SPEED,
                   u[2] * MAX_ROT_SPEED, u[3] * MAX_TRANS_SPEED)


ZERO_ACTION = ActionCommand()


@dataclass(frozen=True)
class DeviceState:
    wire_tip: ArcPosition
    wire_rotation: float
    catheter_tip: ArcPosition
    catheter_rotation: float
    inserted_wire: float
    inserted_catheter: float
    position_history: Tuple[Tuple[Tuple[float, ...], ...], ...] = ()
    stalled: bool = False


@dataclass(frozen=True)
class Observation:
    tip_points: np.ndarray        # (3, 2), normalised, index 0 is the tip
    prev_tip_points: np.ndarray   # (3, 2)
    target: np.ndarray            # (2,)
    prev_action: ActionCommand
    tip_points_mm: np.ndarray     # (3, 2) before normalisation
    target_mm: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.tip_points.ravel(), self.prev_tip_points.ravel(),
                               self.target, self.prev_action.normalized()])

    def with_target(self, target_mm: np.ndarray, cfg: "SimConfig") -> "Observation":
        target_mm = np.asarray(target_mm, dtype=float)
        return replace(self, target=normalize(target_mm, cfg), target_mm=target_mm)


OBS_DIM = 18
ACT_DIM = 4


def project(position, drop_axis: int = 1) -> np.ndarray:
    """Orthographic projection dropping one axis (default: the anterior-posterior one)."""
    p = np.asarray(position, dtype=float)
    keep = [k for k in range(3) if k != drop_axis]
    return p[..., keep]


def normalize(points_2d: np.ndarray, cfg: SimConfig) -> np.ndarray:
    lo = np.asarray(cfg.workspace_lo)
    hi = np.asarray(cfg.workspace_hi)
    return np.clip(2.0 * (np.asarray(points_2d) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def initial_state(tree: VascTree, tip: ArcPosition, cfg: SimConfig,
                  rotation: float = 0.0) -> DeviceState:
    """Wire tip at ``tip``, catheter a fixed gap behind, zero rotation."""
    tree.check(tip)
    inserted = tree.root_distance(tip)
    cath = max(0.0, inserted - cfg.initial_catheter_gap_mm)
    st = DeviceState(tip, rotation % 360.0, position_along_path(tree, tip, cath), 0.0,
                     inserted, cath)
    pts = wire_points(tree, st, cfg)
    return replace(st, position_history=(_freeze(pts),))


def _freeze(pts: np.ndarray):
    return tuple(tuple(float(v) for v in row) for row in pts)


def wire_points(tree: VascTree, state: DeviceState, cfg: SimConfig) -> np.ndarray:
    """3D wire positions at 0, 2 and 4 mm behind the tip, including the tip bend."""
    out = np.empty((3, 3))
    t = tree.branches[state.wire_tip.branch].tangent_at(state.wire_tip.s)
    e1, e2 = _frame(t)
    rot = math.radians(state.wire_rotation)
    bend_dir = math.cos(rot) * e1 + math.sin(rot) * e2
    bend = min(cfg.tip_bend_mm, 0.8 * tree.radius(state.wire_tip))
    for k, off in enumerate(TIP_OFFSETS):
        pos = position_along_path(tree, state.wire_tip, state.inserted_wire - off)
        out[k] = tree.position(pos) + bend * cfg.tip_bend_profile[k] * bend_dir
    return out


def _ang_dist(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def entry_probability(cfg: SimConfig, misalignment: float, takeoff: float,
                      supported: bool) -> float:
    """Chance the wire tip turns into a side branch at its origin.

    Logistic in the angular misalignment between the tip bend and the
    branch; the acceptance window narrows as the required turn sharpens.
    Equals ``p_aligned`` for a perfectly aligned, supported tip.
    """
    if not supported and misalignment > cfg.hard_misalign_deg:
        return 0.0
    window = cfg.window_deg * max(0.0, 180.0 - takeoff) / 90.0
    sc = cfg.misalign_scale_deg
    g = _sigmoid((window - misalignment) / sc) / _sigmoid(window / sc)
    p = cfg.p_aligned * min(1.0, g)
    return p if supported else p * cfg.unsupported_factor


def _advance(tree: VascTree, tip: ArcPosition, dist: float, rotation: float,
             cath_inserted: float, rng: np.random.Generator, cfg: SimConfig):
    b, s = tip.branch, tip.s
    remaining = dist
    skip: set = set()
    stalled = False
    while remaining > 1e-12:
        br = tree.branches[b]
        nxt = None
        for c in tree.children(b):
            a = tree.attach_s(c)
            if a >= br.length - 1e-9:
                continue
            if a >= s - 1e-9 and c not in skip:
                nxt = (a, c)
                break
        stop = nxt[0] if nxt is not None else br.length
        if stop - s >= remaining:
            s += remaining
            remaining = 0.0
            break
        remaining -= max(stop - s, 0.0)
        s = stop
        if nxt is not None:
            c = nxt[1]
            support = tree.root_distance(ArcPosition(b, s)) - cath_inserted <= cfg.support_distance_mm
            mis = _ang_dist(rotation, tree.orientation(c))
            p = entry_probability(cfg, mis, tree.branches[c].takeoff_angle, support)
            if rng.random() < p:
                b, s, skip = c, 0.0, set()
            else:
                skip.add(c)
            continue
        ends = [c for c in tree.children(b) if tree.attach_s(c) >= br.length - 1e-9]
        if not ends:
            stalled = True
            break
        if len(ends) == 1:
            b, s, skip = ends[0], 0.0, set()
            continue
        support = tree.root_distance(ArcPosition(b, s)) - cath_inserted <= cfg.support_distance_mm
        w = np.array([entry_probability(cfg, _ang_dist(rotation, tree.orientation(c)),
                                        tree.branches[c].takeoff_angle, support) for c in ends])
        if w.sum() <= 0:
            stalled = True
            break
        b, s, skip = ends[int(rng.choice(len(ends), p=w / w.sum()))], 0.0, set()
    return ArcPosition(b, s), stalled


def _retract(tree: VascTree, tip: ArcPosition, dist: float):
    b, s = tip.branch, tip.s
    remaining = dist
    while True:
        if s - remaining > 1e-9:
            return ArcPosition(b, s - remaining), False
        remaining -= s
        parent = tree.branches[b].parent
        if parent is None:
            return ArcPosition(b, 0.0), remaining > 1e-9
        b, s = parent[0], tree.attach_s(b)
        if remaining <= 1e-9:
            return ArcPosition(b, s), False


def step(tree: VascTree, state: DeviceState, action: ActionCommand, dt: float,
         rng: np.random.Generator, cfg: Optional[SimConfig] = None) -> DeviceState:
    """Advance both devices by one control interval.

    Speeds are clamped; an advance that runs into a dead end or the device
    limit is truncated and flagged as a stall. Retracting past a branch
    origin puts the tip back on the parent branch.
    """
    cfg = cfg or SimConfig()
    if not dt > 0:
        raise ConfigurationError("dt must be > 0")
    a = action if isinstance(action, ActionCommand) else ActionCommand(*action)
    if cfg.catheter_mode != "agent":
        a = ActionCommand(a.wire_rot_speed, a.wire_trans_speed, 0.0, 0.0)
    if not a.as_array().any():
        return state
    wire_rot = (state.wire_rotation + a.wire_rot_speed * dt) % 360.0
    cath_rot = (state.catheter_rotation + a.cath_rot_speed * dt) % 360.0
    delta = a.wire_trans_speed * dt
    goal = min(max(state.inserted_wire + delta, 0.0), cfg.wire_length_mm)
    tip, stalled = state.wire_tip, False
    if goal > state.inserted_wire:
        tip, stalled = _advance(tree, tip, goal - state.inserted_wire, wire_rot,
                                state.inserted_catheter, rng, cfg)
    elif goal < state.inserted_wire:
        tip, stalled = _retract(tree, tip, state.inserted_wire - goal)
    elif delta != 0.0:
        stalled = True
    inserted = tree.root_distance(tip)
    if cfg.catheter_mode == "follow":
        cath = max(0.0, inserted - cfg.initial_catheter_gap_mm)
    else:
        cath = state.inserted_catheter + a.cath_trans_speed * dt
    cath = min(max(cath, 0.0), inserted, cfg.catheter_length_mm)
    new = DeviceState(tip, wire_rot, position_along_path(tree, tip, cath), cath_rot,
                      inserted, cath, (), stalled)
    hist = (state.position_history + (_freeze(wire_points(tree, new, cfg)),))[-cfg.history:]
    return replace(new, position_history=hist)


def observe(tree: VascTree, state: DeviceState, target: ArcPosition,
            prev_action: ActionCommand, cfg: Optional[SimConfig] = None,
            prev_tip_points: Optional[np.ndarray] = None) -> Observation:
    """Encode the state as the agent sees it.

    ``prev_tip_points`` (projected, mm) defaults to the previous entry of the
    state's position history, or the current points when there is none.
    """
    cfg = cfg or SimConfig()
    hist = state.position_history
    pts3 = np.array(hist[-1]) if hist else wire_points(tree, state, cfg)
    pts = project(pts3, cfg.drop_axis)
    if prev_tip_points is None:
        prev_tip_points = project(np.array(hist[-2]), cfg.drop_axis) if len(hist) >= 2 else pts
    tgt = project(tree.position(target), cfg.drop_axis)
    return Observation(normalize(pts, cfg), normalize(prev_tip_points, cfg), normalize(tgt, cfg),
                       prev_action, pts, tgt)


class Observer:
    """Remembers the last observed tip points so consecutive observations chain."""

    def __init__(self, cfg: Optional[SimConfig] = None):
        self.cfg = cfg or SimConfig()
        self._last: Optional[np.ndarray] = None

    def reset(self) -> None:
        self._last = None

    def observe(self, tree: VascTree, state: DeviceState, target: ArcPosition,
                prev_action: ActionCommand) -> Observation:
        obs = observe(tree, state, target, prev_action, self.cfg,
                      prev_tip_points=self._last)
        self._last = obs.tip_points_mm
        return obs


TRAJECTORY_FIELDS = ("episode", "step", "tip_x", "tip_y", "tip_z", "proj_u", "proj_v",
                     "wire_rot_speed", "wire_trans_speed", "cath_rot_speed",
                     "cath_trans_speed", "reward", "done")


def write_trajectory_csv(path, rows: Iterable[dict], extra_fields: Sequence[str] = ()) -> None:
    fields = list(TRAJECTORY_FIELDS) + list(extra_fields)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
