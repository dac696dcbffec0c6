"""Sub-task and composed-task definitions on a labelled anatomy."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from .errors import ConfigurationError
from .vasctree import ArcPosition, TargetSet, VascTree, sample_targets

SUBTASK_LABELS = ("A1", "A2R", "A2L", "A3R", "A3L")


@dataclass(frozen=True)
class Subtask:
    label: str
    start_vessel: Optional[str]     # None: the insertion point
    target_vessel: str


SUBTASKS: Dict[str, Subtask] = {
    "A1": Subtask("A1", None, "DESC_AORTA"),
    "A2R": Subtask("A2R", "DESC_AORTA", "RCCA"),
    "A2L": Subtask("A2L", "DESC_AORTA", "LCCA"),
    "A3R": Subtask("A3R", "RCCA", "RICA"),
    "A3L": Subtask("A3L", "LCCA", "LICA"),
}


@dataclass(frozen=True)
class ComposedSpec:
    label: str
    name: str
    chain: Tuple[str, ...]
    side: str

    @property
    def start_vessel(self) -> Optional[str]:
        return SUBTASKS[self.chain[0]].start_vessel

    @property
    def target_vessel(self) -> str:
        return SUBTASKS[self.chain[-1]].target_vessel

    @property
    def family(self) -> str:
        return self.label[:-1]


COMPOSED: Dict[str, ComposedSpec] = {c.label: c for c in (
    ComposedSpec("A12R", "A1,2 (R)", ("A1", "A2R"), "R"),
    ComposedSpec("A23R", "A2,3 (R)", ("A2R", "A3R"), "R"),
    ComposedSpec("A123R", "A1,2,3 (R)", ("A1", "A2R", "A3R"), "R"),
    ComposedSpec("A12L", "A1,2 (L)", ("A1", "A2L"), "L"),
    ComposedSpec("A23L", "A2,3 (L)", ("A2L", "A3L"), "L"),
    ComposedSpec("A123L", "A1,2,3 (L)", ("A1", "A2L", "A3L"), "L"),
)}
COMPOSED_LABELS = tuple(COMPOSED)

# single-agent baselines train one policy per family on both sides
FAMILIES = {"A12": ("A12R", "A12L"), "A23": ("A23R", "A23L"), "A123": ("A123R", "A123L")}

TARGET_VESSELS = ("DESC_AORTA", "RCCA", "RICA", "LCCA", "LICA")


def stable_seed(*parts) -> int:
    """Deterministic 32-bit seed from strings and integers."""
    return zlib.crc32("/".join(str(p) for p in parts).encode()) & 0xFFFFFFFF


class TreeTasks:
    """The fixed 20-point sets of one anatomy, shared by every model."""

    def __init__(self, tree: VascTree, seed: int):
        self.tree = tree
        self.seed = seed
        self.sets: Dict[str, TargetSet] = {}
        for label in TARGET_VESSELS:
            b = tree.by_label(label)
            self.sets[label] = sample_targets(tree, b.id, stable_seed(seed, label))

    def starts(self, vessel: Optional[str]) -> Tuple[ArcPosition, ...]:
        if vessel is None:
            return (self.tree.insertion,)
        return self.sets[vessel].all

    def targets(self, vessel: str, split: str) -> Tuple[ArcPosition, ...]:
        ts = self.sets[vessel]
        if split not in ("train", "eval", "all"):
            raise ConfigurationError(f"unknown target split {split!r}")
        return getattr(ts, split)
