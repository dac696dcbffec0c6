"""Run configuration: presets, YAML loading with strict keys, seed streams."""
from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .errors import ConfigurationError
from .guidesim import SimConfig
from .sac import SacConfig
from .tasks import COMPOSED_LABELS, SUBTASK_LABELS
from .vasctree import AnatomyParams

VARIANTS = ("hm-marl-1", "sa-rl-1", "hm-marl-10")
SA_FAMILIES = ("A12", "A23", "A123")

# desk-scale SAC: small networks, one update per two environment steps
DESK_SAC = dict(hidden=[64, 64], batch_size=128, update_every=2, warmup_steps=2000,
                reward_scale=100.0, init_alpha=0.1, total_steps=200_000,
                eval_every=10_000, eval_episodes=50)

PRESETS: Dict[str, dict] = {
    "desk": {
        "anatomy": {"n_trees": 10},
        "sac": dict(DESK_SAC),
        "train": {"variants": list(VARIANTS), "steps_per_subtask": 200_000},
        "eval": {"episodes": 50},
    },
    "small": {
        "anatomy": {"n_trees": 10},
        "sac": dict(DESK_SAC),
        "train": {"variants": list(VARIANTS), "steps_per_subtask": 200_000},
        "eval": {"episodes": 10},
    },
    "tiny": {
        "anatomy": {"n_trees": 2},
        "sac": dict(DESK_SAC, hidden=[16, 16], batch_size=32, warmup_steps=100,
                    eval_every=200, eval_episodes=3),
        "train": {"variants": list(VARIANTS), "steps_per_subtask": 400},
        "eval": {"episodes": 2, "timeout": 60},
    },
    "paper": {
        "anatomy": {"n_trees": 10},
        "sac": dict(DESK_SAC, hidden=[256, 256], batch_size=256, update_every=1,
                    total_steps=10_000_000),
        "train": {"variants": list(VARIANTS), "steps_per_subtask": 10_000_000},
        "eval": {"episodes": 50},
    },
}


@dataclass
class AnatomySection:
    n_trees: int = 10
    params: Dict[str, Any] = field(default_factory=dict)
    task_seed: int = 0          # seeds the 20-point start/target sets


@dataclass
class TrainSection:
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    steps_per_subtask: int = 200_000
    subtasks: List[str] = field(default_factory=lambda: list(SUBTASK_LABELS))
    families: List[str] = field(default_factory=lambda: list(SA_FAMILIES))
    multi_trees: int = 10


@dataclass
class EvalSection:
    episodes: int = 50
    tasks: List[str] = field(default_factory=lambda: list(COMPOSED_LABELS))
    models: List[str] = field(default_factory=lambda: list(VARIANTS))
    timeout: int = 1500
    alpha: float = 0.05


_SECTIONS = {"seed", "preset", "anatomy", "sim", "sac", "train", "eval", "tsm"}


def _strict(cls, d: dict, where: str):
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected a mapping")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "desk"
    anatomy: AnatomySection = field(default_factory=AnatomySection)
    sim: Dict[str, Any] = field(default_factory=dict)
    sac: Dict[str, Any] = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    tsm: Optional[str] = None

    # -- construction ---------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - _SECTIONS
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        preset = d.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        merged = copy.deepcopy(PRESETS[preset])
        for k, v in d.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k].update(v)
            else:
                merged[k] = v
        try:
            seed = int(merged.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError("seed must be an integer") from exc
        if not 0 <= seed < 2 ** 64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        cfg = cls(seed=seed, preset=preset,
                  anatomy=_strict(AnatomySection, merged.get("anatomy"), "anatomy"),
                  sim=dict(merged.get("sim") or {}), sac=dict(merged.get("sac") or {}),
                  train=_strict(TrainSection, merged.get("train"), "train"),
                  eval=_strict(EvalSection, merged.get("eval"), "eval"),
                  tsm=merged.get("tsm"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed YAML in {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def validate(self) -> None:
        if self.anatomy.n_trees < 0:
            raise ConfigurationError("n_trees must be >= 0")
        self.anatomy_params().validate()
        self.sim_config().validate()
        self.sac_config()
        for v in self.train.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}")
        for m in self.eval.models:
            if m not in VARIANTS:
                raise ConfigurationError(f"unknown model {m!r}")
        for s in self.train.subtasks:
            if s not in SUBTASK_LABELS:
                raise ConfigurationError(f"unknown sub-task {s!r}")
        for f in self.train.families:
            if f not in SA_FAMILIES:
                raise ConfigurationError(f"unknown task family {f!r}")
        for t in self.eval.tasks:
            if t not in COMPOSED_LABELS and t not in SUBTASK_LABELS:
                raise ConfigurationError(f"unknown task {t!r}")
        if self.train.steps_per_subtask <= 0 or self.eval.episodes < 0 or self.eval.timeout <= 0:
            raise ConfigurationError("step budgets, episode counts and timeouts must be positive")
        if self.train.multi_trees < 1:
            raise ConfigurationError("multi_trees must be >= 1")

    # -- typed views ---------------------------------------------------------------------
    def anatomy_params(self) -> AnatomyParams:
        try:
            return AnatomyParams.from_dict(self.anatomy.params)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"anatomy.params: {exc}") from exc

    def sim_config(self) -> SimConfig:
        unknown = set(self.sim) - set(SimConfig.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"sim: unknown keys {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in self.sim.items()}
        return SimConfig(**d)

    def sac_config(self, total_steps: Optional[int] = None) -> SacConfig:
        d = dict(self.sac)
        if total_steps is not None:
            d["total_steps"] = int(total_steps)
        cfg = SacConfig.from_dict(d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "preset": self.preset,
            "anatomy": {"n_trees": self.anatomy.n_trees, "params": dict(self.anatomy.params),
                        "task_seed": self.anatomy.task_seed},
            "sim": dict(self.sim), "sac": dict(self.sac),
            "train": {"variants": list(self.train.variants),
                      "steps_per_subtask": self.train.steps_per_subtask,
                      "subtasks": list(self.train.subtasks), "families": list(self.train.families),
                      "multi_trees": self.train.multi_trees},
            "eval": {"episodes": self.eval.episodes, "tasks": list(self.eval.tasks),
                     "models": list(self.eval.models), "timeout": self.eval.timeout,
                     "alpha": self.eval.alpha},
            "tsm": self.tsm,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def training_digest(self) -> str:
        """Hash of the settings a trained agent depends on (not the eval or variant lists)."""
        d = self.to_dict()
        body = {k: d[k] for k in ("seed", "anatomy", "sim", "sac")}
        body["train"] = {k: d["train"][k] for k in ("steps_per_subtask", "subtasks", "families",
                                                    "multi_trees")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    # -- seeds ---------------------------------------------------------------------------
    def stream(self, name: str, *parts) -> int:
        """Named 32-bit seed derived from the root seed (anatomy, training, evaluation, ...)."""
        key = "/".join([name] + [str(p) for p in parts])
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, zlib.crc32(key.encode())])
        return int(ss.generate_state(1)[0])
