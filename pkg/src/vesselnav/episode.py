"""Episode lifecycle: reset, dense reward, success and timeout detection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, LifecycleError
from .guidesim import (ZERO_ACTION, ActionCommand, DeviceState, Observation, Observer,
                       SimConfig, initial_state, project, step)
from .tasks import COMPOSED, FAMILIES, SUBTASKS, TreeTasks
from .vasctree import ArcPosition, VascTree, pathlength

TRAIN_TIMEOUT = 200
EVAL_TIMEOUT = 1500


@dataclass(frozen=True)
class RewardTerms:
    base_penalty: float = -0.00015
    progress_coeff: float = -0.001
    success_bonus: float = 1.0


REWARD = RewardTerms()


def reward(prev_pathlength: float, new_pathlength: float, reached: bool) -> float:
    """Per-step reward: small time penalty, pathlength progress, +1 on arrival."""
    r = REWARD.base_penalty + REWARD.progress_coeff * (new_pathlength - prev_pathlength)
    return r + (REWARD.success_bonus if reached else 0.0)


def check_success(tree: VascTree, tip: ArcPosition, target: ArcPosition,
                  radius_scale: float = 1.0) -> bool:
    """Tip within the target sphere (radius = vessel radius at the target, closed)."""
    d = float(np.linalg.norm(tree.position(tip) - tree.position(target)))
    return d <= radius_scale * tree.radius(target)


@dataclass(frozen=True)
class EpisodeConfig:
    timeout_steps: int
    start_set: Tuple[ArcPosition, ...]
    target_set: Tuple[ArcPosition, ...]
    task_label: str = ""
    dt: float = 2.0 / 15.0

    def validate(self) -> None:
        if self.timeout_steps <= 0:
            raise ConfigurationError("timeout_steps must be > 0")
        if not self.start_set or not self.target_set:
            raise ConfigurationError(f"{self.task_label}: empty start or target set")
        if not self.dt > 0:
            raise ConfigurationError("dt must be > 0")


def task_config(tasks: TreeTasks, label: str, split: str, timeout: int,
                dt: float = 2.0 / 15.0) -> EpisodeConfig:
    """Episode configuration for a sub-task, composed task or single-agent family."""
    if label in SUBTASKS:
        st = SUBTASKS[label]
        starts = tasks.starts(st.start_vessel)
        targets = tasks.targets(st.target_vessel, split)
    elif label in COMPOSED:
        c = COMPOSED[label]
        starts = tasks.starts(c.start_vessel)
        targets = tasks.targets(c.target_vessel, split)
    elif label in FAMILIES:
        specs = [COMPOSED[c] for c in FAMILIES[label]]
        starts = tasks.starts(specs[0].start_vessel)
        targets = sum((tasks.targets(c.target_vessel, split) for c in specs), ())
    else:
        raise ConfigurationError(f"unknown task {label!r}")
    return EpisodeConfig(timeout, tuple(starts), tuple(targets), label, dt)


def reset(tree: VascTree, config: EpisodeConfig, rng: np.random.Generator,
          sim: Optional[SimConfig] = None) -> Tuple[DeviceState, ArcPosition]:
    """Draw a start and a target uniformly from the configured sets."""
    config.validate()
    sim = sim or SimConfig()
    start = config.start_set[int(rng.integers(len(config.start_set)))]
    target = config.target_set[int(rng.integers(len(config.target_set)))]
    return initial_state(tree, start, sim), target


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    reached: bool
    timed_out: bool

    @property
    def done(self) -> bool:
        return self.reached or self.timed_out


@dataclass
class EpisodeResult:
    task: str
    success: bool
    steps: int
    initial_pathlength: float
    final_pathlength: float
    seed: int = 0
    dt: float = 2.0 / 15.0
    tree: int = 0

    @property
    def procedure_time(self) -> Optional[float]:
        return self.steps * self.dt if self.success else None

    @property
    def path_ratio(self) -> float:
        return self.final_pathlength / self.initial_pathlength if self.initial_pathlength > 0 else 0.0


class Episode:
    """Single-owner mutable bundle for one navigation attempt."""

    def __init__(self, tree: VascTree, config: EpisodeConfig, rng: np.random.Generator,
                 sim: Optional[SimConfig] = None, episode_id: int = 0, record: bool = False,
                 target: Optional[ArcPosition] = None):
        self.tree = tree
        self.config = config
        self.sim = sim or SimConfig(dt=config.dt)
        self.rng = rng
        self.episode_id = episode_id
        self.state, self.target = reset(tree, config, rng, self.sim)
        if target is not None:
            self.target = target
        self.steps = 0
        self.finished = False
        self.reached = False
        self.total_reward = 0.0
        self.prev_action = ZERO_ACTION
        self.observer = Observer(self.sim)
        self.initial_pathlength = pathlength(tree, self.state.wire_tip, self.target)
        self.pathlength = self.initial_pathlength
        self.observation = self.observer.observe(tree, self.state, self.target, self.prev_action)
        self.record = record
        self.log: List[dict] = []
        if check_success(tree, self.state.wire_tip, self.target):
            # degenerate start inside the target sphere; nothing to navigate
            self.reached = self.finished = True

    def target_mm(self, target: Optional[ArcPosition] = None) -> np.ndarray:
        return project(self.tree.position(target or self.target), self.sim.drop_axis)

    def run_step(self, action: ActionCommand) -> StepResult:
        if self.finished:
            raise LifecycleError("episode already terminated")
        self.state = step(self.tree, self.state, action, self.config.dt, self.rng, self.sim)
        new_pl = pathlength(self.tree, self.state.wire_tip, self.target)
        self.steps += 1
        reached = check_success(self.tree, self.state.wire_tip, self.target)
        timed_out = (not reached) and self.steps >= self.config.timeout_steps
        r = reward(self.pathlength, new_pl, reached)
        self.pathlength = new_pl
        self.total_reward += r
        self.prev_action = action
        self.reached = reached
        self.finished = reached or timed_out
        self.observation = self.observer.observe(self.tree, self.state, self.target, action)
        if self.record:
            tip = self.tree.position(self.state.wire_tip)
            uv = project(tip, self.sim.drop_axis)
            a = action.as_array()
            self.log.append(dict(episode=self.episode_id, step=self.steps,
                                 tip_x=float(tip[0]), tip_y=float(tip[1]), tip_z=float(tip[2]),
                                 proj_u=float(uv[0]), proj_v=float(uv[1]),
                                 wire_rot_speed=float(a[0]), wire_trans_speed=float(a[1]),
                                 cath_rot_speed=float(a[2]), cath_trans_speed=float(a[3]),
                                 reward=r, done=int(self.finished)))
        return StepResult(self.observation, r, reached, timed_out)

    def result(self, seed: int = 0, tree_index: int = 0) -> EpisodeResult:
        return EpisodeResult(self.config.task_label, self.reached, self.steps,
                             self.initial_pathlength, self.pathlength, seed, self.config.dt,
                             tree_index)


class NavEnv:
    """Training environment over one or more anatomies (cycled per episode).

    Observations and actions are flat arrays: actions in [-1, 1]^4 are mapped
    to physical speeds.
    """

    def __init__(self, scenarios: Sequence[Tuple[VascTree, EpisodeConfig]],
                 seed: int = 0, sim: Optional[SimConfig] = None):
        if not scenarios:
            raise ConfigurationError("NavEnv needs at least one scenario")
        self.scenarios = list(scenarios)
        self.sim = sim or SimConfig()
        self.rng = np.random.default_rng(seed)
        self.n_episodes = 0
        self.episode: Optional[Episode] = None

    def reset(self) -> np.ndarray:
        tree, cfg = self.scenarios[self.n_episodes % len(self.scenarios)]
        self.episode = Episode(tree, cfg, self.rng, self.sim, self.n_episodes)
        self.n_episodes += 1
        if self.episode.finished:
            return self.reset()
        return self.episode.observation.as_vector()

    def step(self, action_unit) -> Tuple[np.ndarray, float, bool, bool]:
        res = self.episode.run_step(ActionCommand.from_unit(action_unit))
        return res.observation.as_vector(), res.reward, res.reached, res.timed_out


SUMMARY_FIELDS = ("task", "seed", "success", "steps", "sim_seconds",
                  "initial_pathlength", "final_pathlength")


def write_summary_csv(path, results: Sequence[EpisodeResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in results:
            w.writerow([r.task, r.seed, int(r.success), r.steps, f"{r.steps * r.dt:.6f}",
                        f"{r.initial_pathlength:.6f}", f"{r.final_pathlength:.6f}"])
