"""Hierarchical composition of sub-task policies.

Every pre-trained sub-task policy proposes an action for the current state
(with its own intermediate target in the target slot); a rule-based task
selection module (TSM) executes the proposal of the sub-task responsible for
the anatomical region that holds the wire tip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .episode import Episode, EpisodeResult
from .errors import ConfigurationError, LoadError
from .guidesim import ActionCommand, Observation
from .sac import SacAgent
from .tasks import COMPOSED, SUBTASKS, ComposedSpec
from .vasctree import ArcPosition, VascTree, pathlength


@dataclass(frozen=True)
class Span:
    vessel: str
    from_mm: float = 0.0
    to_mm: float = math.inf

    def contains(self, tree: VascTree, pos: ArcPosition) -> bool:
        b = tree.branches[pos.branch]
        return b.label == self.vessel and self.from_mm <= pos.s and (
            pos.s < self.to_mm or (math.isinf(self.to_mm) and pos.s <= b.length))

    def distance(self, tree: VascTree, pos: ArcPosition) -> float:
        """Pathlength from ``pos`` to the nearest point of this span."""
        b = tree.by_label(self.vessel)
        lo, hi = self.from_mm, min(self.to_mm, b.length)
        if lo > hi:
            return math.inf
        lin = tree.lineage(pos.branch)
        if pos.branch == b.id:
            entry = pos.s
        elif b.id in lin:
            entry = tree.attach_s(lin[lin.index(b.id) + 1])
        else:
            entry = 0.0
        return pathlength(tree, pos, ArcPosition(b.id, min(max(entry, lo), hi)))


@dataclass(frozen=True)
class Region:
    label: str
    spans: Tuple[Span, ...]

    def contains(self, tree: VascTree, pos: ArcPosition) -> bool:
        return any(s.contains(tree, pos) for s in self.spans)

    def distance(self, tree: VascTree, pos: ArcPosition) -> float:
        return min(s.distance(tree, pos) for s in self.spans)


@dataclass
class TsmConfig:
    regions: Dict[str, Tuple[Region, ...]]
    hysteresis_mm: float = 5.0
    intermediate_offset_mm: float = 10.0

    def validate(self) -> None:
        if self.hysteresis_mm < 0 or self.intermediate_offset_mm < 0:
            raise ConfigurationError("hysteresis and offset must be >= 0")
        for side, regs in self.regions.items():
            if side not in ("R", "L"):
                raise ConfigurationError(f"unknown side {side!r}")
            for r in regs:
                if r.label not in SUBTASKS:
                    raise ConfigurationError(f"unknown sub-task label {r.label!r}")
                if not r.spans:
                    raise ConfigurationError(f"region {r.label} has no spans")

    def coverage_gaps(self, tree: VascTree, side: str, step_mm: float = 0.5) -> List[ArcPosition]:
        """Sampled tree positions that fall in no region."""
        gaps = []
        for bid, b in tree.branches.items():
            for s in np.append(np.arange(0.0, b.length, step_mm), b.length):
                p = ArcPosition(bid, float(s))
                if not any(r.contains(tree, p) for r in self.regions[side]):
                    gaps.append(p)
        return gaps

    @classmethod
    def from_dict(cls, d: dict) -> "TsmConfig":
        unknown = set(d) - {"regions", "hysteresis_mm", "intermediate_offset_mm"}
        if unknown:
            raise ConfigurationError(f"unknown TSM keys: {sorted(unknown)}")
        try:
            regions = {}
            for side, regs in d["regions"].items():
                out = []
                for r in regs:
                    spans = []
                    for sp in r["spans"]:
                        bad = set(sp) - {"vessel", "from_mm", "to_mm"}
                        if bad:
                            raise ConfigurationError(f"unknown span keys: {sorted(bad)}")
                        spans.append(Span(sp["vessel"], float(sp.get("from_mm", 0.0)),
                                          float(sp.get("to_mm", math.inf))))
                    out.append(Region(r["label"], tuple(spans)))
                regions[side] = tuple(out)
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigurationError(f"malformed TSM config: {exc}") from exc
        cfg = cls(regions, float(d.get("hysteresis_mm", 5.0)), float(d.get("intermediate_offset_mm", 10.0)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None) -> "TsmConfig":
        """Read a YAML region map; the packaged default when ``path`` is None."""
        try:
            if path is None:
                text = resources.files("vesselnav").joinpath("data/tsm_default.yaml").read_text()
            else:
                with open(path) as fh:
                    text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read TSM config {path}: {exc}") from exc
        return cls.from_dict(yaml.safe_load(text))


@dataclass
class SubtaskPolicy:
    label: str
    agent: SacAgent

    def __post_init__(self):
        if self.label not in SUBTASKS:
            raise ConfigurationError(f"unknown sub-task {self.label!r}")

    @property
    def end_vessel(self) -> str:
        return SUBTASKS[self.label].target_vessel

    def intermediate_target(self, tree: VascTree, offset_mm: float) -> ArcPosition:
        """Entry of the next sub-task's start vessel (this one's end vessel)."""
        b = tree.by_label(self.end_vessel)
        return ArcPosition(b.id, min(offset_mm, b.length))

    @classmethod
    def load(cls, label: str, path) -> "SubtaskPolicy":
        try:
            return cls(label, SacAgent.load(path))
        except (OSError, KeyError) as exc:
            raise LoadError(f"cannot load policy {label} from {path}: {exc}") from exc


@dataclass
class ComposedTask:
    spec: ComposedSpec

    @classmethod
    def get(cls, label: str) -> "ComposedTask":
        if label not in COMPOSED:
            raise ConfigurationError(f"unknown composed task {label!r}")
        return cls(COMPOSED[label])

    @property
    def label(self) -> str:
        return self.spec.label

    @property
    def chain(self) -> Tuple[str, ...]:
        return self.spec.chain

    @property
    def side(self) -> str:
        return self.spec.side


def propose_all(policies: Sequence[SubtaskPolicy], observations: Sequence[Observation]) -> List[ActionCommand]:
    """Deterministic proposal from every policy on its own framed observation."""
    if len(policies) != len(observations):
        raise ConfigurationError("one framed observation per policy is required")
    return [p.agent.act(o.as_vector(), "eval") for p, o in zip(policies, observations)]


@dataclass
class Selection:
    label: str
    index: int
    anomaly: bool = False


def region_label(tree: VascTree, pos: ArcPosition, cfg: TsmConfig, side: str) -> Tuple[str, bool]:
    """Label of the first region containing ``pos``; nearest region when none does."""
    regs = cfg.regions[side]
    for r in regs:
        if r.contains(tree, pos):
            return r.label, False
    best = min(regs, key=lambda r: r.distance(tree, pos))
    return best.label, True


def tsm_select(proposals: Sequence[ActionCommand], labels: Sequence[str], tree: VascTree,
               tip: ArcPosition, cfg: TsmConfig, side: str,
               previous: Optional[str] = None) -> Tuple[ActionCommand, Selection]:
    """Pick the proposal of the sub-task in charge of the tip's region.

    ``labels`` names the proposals (the composed task's chain, in order).
    The previous selection is kept while the tip is within the hysteresis
    distance of that sub-task's region. A region label that is not part of
    the chain is clamped to the nearest chain element and flagged.
    """
    if len(proposals) != len(labels):
        raise ConfigurationError("proposals and labels differ in length")
    label, anomaly = region_label(tree, tip, cfg, side)
    if previous is not None and previous != label and previous in labels:
        for r in cfg.regions[side]:
            if r.label == previous and r.distance(tree, tip) <= cfg.hysteresis_mm:
                label = previous
                break
    if label not in labels:
        order = [r.label for r in cfg.regions[side]]
        pos = order.index(label) if label in order else 0
        ranks = [order.index(l) if l in order else 0 for l in labels]
        label = labels[int(np.argmin([abs(k - pos) for k in ranks]))]
        anomaly = True
    i = list(labels).index(label)
    return proposals[i], Selection(label, i, anomaly)


def frame_observations(episode: Episode, policies: Sequence[SubtaskPolicy],
                       cfg: TsmConfig) -> List[Observation]:
    """Each policy sees the global state with its own target; the last sees the real one."""
    obs = episode.observation
    out = []
    for k, p in enumerate(policies):
        if k == len(policies) - 1:
            out.append(obs)
        else:
            t = p.intermediate_target(episode.tree, cfg.intermediate_offset_mm)
            out.append(obs.with_target(episode.target_mm(t), episode.sim))
    return out


@dataclass
class ComposedRun:
    result: EpisodeResult
    selections: List[str] = field(default_factory=list)
    anomalies: int = 0


def run_composed(task: ComposedTask, policies: Dict[str, SubtaskPolicy], tsm: TsmConfig,
                 episode: Episode, seed: int = 0) -> ComposedRun:
    """Drive ``episode`` to termination with the TSM choosing among the chain's policies."""
    missing = [l for l in task.chain if l not in policies]
    if missing:
        raise LoadError(f"{task.label}: no policy for {missing}")
    chain = [policies[l] for l in task.chain]
    labels = list(task.chain)
    run = ComposedRun(None)
    prev: Optional[str] = None
    while not episode.finished:
        props = propose_all(chain, frame_observations(episode, chain, tsm))
        action, sel = tsm_select(props, labels, episode.tree, episode.state.wire_tip, tsm,
                                 task.side, prev)
        prev = sel.label
        run.selections.append(sel.label)
        run.anomalies += sel.anomaly
        episode.run_step(action)
        if episode.record:
            episode.log[-1]["selected_subtask"] = sel.label
    run.result = episode.result(seed)
    return run
